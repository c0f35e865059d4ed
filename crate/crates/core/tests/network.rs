use dnl::data::{generate, Rng, SegSample, ShapesSpec};
use dnl::network::{joint_loss, model_forward, Checkpoint, LossWeights, ModelParams, NetConfig};
use dnl::tensor::{Graph, Tensor};
use dnl::training::{collate, loss_and_grads, sgd_step, OptimizerState, TrainConfig};
use dnl::Error;

fn tiny() -> NetConfig {
    NetConfig { stem_widths: [4, 8, 8, 8], channels: 8, reduced_channels: 2, head_channels: 8, ..NetConfig::default() }
}

fn image(rng: &mut Rng, b: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![b, 3, h, w], (0..b * 3 * h * w).map(|_| rng.next_f64()).collect()).unwrap()
}

#[test]
fn output_strides() {
    let cfg = tiny();
    let params = ModelParams::init(&cfg, &mut Rng::new(1)).unwrap();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(image(&mut Rng::new(2), 2, 64, 48));
    let out = model_forward(&mut g, &bound, x, &cfg).unwrap();
    assert_eq!(g.shape(out.logits), &[2, 4, 8, 6]);
    assert_eq!(g.shape(out.aux2), &[2, 4, 16, 12]);
    assert_eq!(g.shape(out.aux3), &[2, 4, 8, 6]);
    assert_eq!(g.shape(out.coarse.unwrap()), &[2, 4, 4, 3]);
    assert_eq!(out.attention.len(), 2);
    assert_eq!((out.attention[0].height, out.attention[0].width), (4, 3));
}

#[test]
fn coarse_head_only_with_global_rectifying() {
    let cfg = NetConfig { global_rectify: false, ..tiny() };
    let params = ModelParams::init(&cfg, &mut Rng::new(1)).unwrap();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(image(&mut Rng::new(2), 1, 32, 32));
    let out = model_forward(&mut g, &bound, x, &cfg).unwrap();
    assert!(out.coarse.is_none());
    let labels = vec![1u8; 32 * 32];
    let terms = joint_loss(&mut g, &out, &labels, (32, 32), LossWeights::from(&cfg)).unwrap();
    assert_eq!(terms.values(&g).4, 0.0);
}

#[test]
fn joint_loss_weights_terms() {
    let cfg = tiny();
    let params = ModelParams::init(&cfg, &mut Rng::new(3)).unwrap();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(image(&mut Rng::new(4), 1, 32, 32));
    let out = model_forward(&mut g, &bound, x, &cfg).unwrap();
    let labels: Vec<u8> = (0..32 * 32).map(|i| (i % 4) as u8).collect();
    let weights = LossWeights { lambda1: 0.3, lambda2: 0.7, lambda_gr: 0.4 };
    let terms = joint_loss(&mut g, &out, &labels, (32, 32), weights).unwrap();
    let (total, lp, l1, l2, lgr) = terms.values(&g);
    assert!((total - (lp + 0.3 * l1 + 0.7 * l2 + 0.4 * lgr)).abs() < 1e-12);
}

#[test]
fn zero_heads_give_uniform_loss() {
    let cfg = tiny();
    let mut params = ModelParams::init(&cfg, &mut Rng::new(5)).unwrap();
    params.zero_heads();
    params.get_mut("dnl.coarse.weight").unwrap().data_mut().fill(0.0);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(image(&mut Rng::new(6), 1, 32, 32));
    let out = model_forward(&mut g, &bound, x, &cfg).unwrap();
    let labels = vec![2u8; 32 * 32];
    let terms = joint_loss(&mut g, &out, &labels, (32, 32), LossWeights::from(&cfg)).unwrap();
    let (_, lp, l1, l2, lgr) = terms.values(&g);
    for v in [lp, l1, l2, lgr] {
        assert!((v - 4f64.ln()).abs() < 1e-12, "{v}");
    }
}

/// Labels are constant on 8×8 blocks, so the stride-8 logits can fit them exactly.
fn block_sample(seed: u64) -> SegSample {
    let mut rng = Rng::new(seed);
    let classes: Vec<u8> = (0..16).map(|_| (rng.next_u64() % 4) as u8).collect();
    let colours = [[0.1, 0.2, 0.3], [0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.7, 0.7, 0.1]];
    let labels: Vec<u8> = (0..32 * 32).map(|i| classes[(i / 32 / 8) * 4 + (i % 32) / 8]).collect();
    let mut image = vec![0.0; 3 * 32 * 32];
    for ch in 0..3 {
        for (i, &l) in labels.iter().enumerate() {
            image[ch * 1024 + i] = colours[l as usize][ch] + rng.uniform(-0.05, 0.05);
        }
    }
    SegSample { id: "block".into(), image: Tensor::new(vec![3, 32, 32], image).unwrap(), labels }
}

#[test]
fn single_sample_overfits_in_fifty_steps() {
    let sample = block_sample(11);
    let cfg = TrainConfig { net: tiny(), ..TrainConfig::default() };
    let mut params = ModelParams::init(&cfg.net, &mut Rng::new(0)).unwrap();
    let mut opt = OptimizerState::new(&params, 0.05, 0.9, 0.0, 0.9, 10_000);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..50 {
        let (row, grads) = loss_and_grads(&params, &cfg.net, std::slice::from_ref(&sample)).unwrap();
        first.get_or_insert(row.lp);
        last = row.lp;
        sgd_step(&mut params, &grads, &mut opt).unwrap();
    }
    let first = first.unwrap();
    assert!(last < 0.1 * first, "principal CE {first} -> {last}");
}

#[test]
fn running_statistics_track_batch_moments() {
    let cfg = tiny();
    let params = ModelParams::init(&cfg, &mut Rng::new(7)).unwrap();
    let data = generate(&ShapesSpec { height: 32, width: 32, ..ShapesSpec::default() }, 3).unwrap();
    let (images, _, _) = collate(&data.samples).unwrap();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(images);
    model_forward(&mut g, &bound, x, &cfg).unwrap();
    let taps = bound.norm_taps();
    assert_eq!(taps.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>(), cfg.norm_prefixes());

    let mut stats = ModelParams::init_norm_stats(&cfg);
    stats.update_norm_stats(&g, &bound, 1.0).unwrap();
    // The first stem norm sees conv outputs; recompute their moments by hand.
    let (_, v) = &taps[0];
    let (mean, var) = g.batch_stats(*v).unwrap();
    let shape = g.shape(*v).to_vec();
    let count = (shape[0] * shape[2] * shape[3]) as f64;
    let rm = stats.get("stem.0.norm.running_mean").unwrap().data();
    let rv = stats.get("stem.0.norm.running_var").unwrap().data();
    for c in 0..shape[1] {
        assert_eq!(rm[c], mean[c]);
        assert!((rv[c] - var[c] * count / (count - 1.0)).abs() < 1e-12);
    }

    // With running statistics bound, nothing is recorded.
    let mut g2 = Graph::new();
    let bound2 = params.bind(&mut g2, false).with_norm_stats(&stats);
    let x2 = g2.constant(image(&mut Rng::new(8), 1, 32, 32));
    model_forward(&mut g2, &bound2, x2, &cfg).unwrap();
    assert!(bound2.norm_taps().is_empty());
}

#[test]
fn checkpoint_file_round_trip() {
    let cfg = tiny();
    let params = ModelParams::init(&cfg, &mut Rng::new(9)).unwrap();
    let ck = Checkpoint {
        config_text: TrainConfig { net: cfg.clone(), ..TrainConfig::default() }.to_text(),
        iteration: 7,
        velocity: Some(params.zeros_like()),
        norm_stats: Some(ModelParams::init_norm_stats(&cfg)),
        params,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
}

#[test]
fn mismatched_parameters_are_rejected() {
    let params = ModelParams::init(&tiny(), &mut Rng::new(1)).unwrap();
    let other = NetConfig { channels: 16, reduced_channels: 2, ..tiny() };
    assert!(matches!(params.check_against(&other), Err(Error::ConfigMismatch(_))));
    assert!(ModelParams::init_norm_stats(&tiny()).check_norm_stats(&other).is_err());
}

#[test]
fn paper_profile_census() {
    let cfg = TrainConfig::paper_profile().net;
    let total: usize = cfg.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(total, cfg.param_census());
}

use dnl::data::{generate, Dataset, ShapesSpec};
use dnl::network::{ModelParams, NetConfig};
use dnl::training::{
    batch_indices, evaluate, init_params, miou, predict, train, upsample_bilinear, MetricState, TrainConfig,
    TrainOptions,
};
use dnl::Error;
use proptest::prelude::*;

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        net: NetConfig { stem_widths: [4, 8, 8, 8], channels: 8, reduced_channels: 2, head_channels: 8, ..NetConfig::default() },
        crop_height: 32,
        crop_width: 32,
        epochs: 1,
        ..TrainConfig::default()
    }
}

fn small_data(n: usize) -> Dataset {
    generate(&ShapesSpec { height: 32, width: 32, seed: 21, ..ShapesSpec::default() }, n).unwrap()
}

#[test]
fn zero_epochs_returns_initialization() {
    let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), resume: None };
    let out = train(&cfg, &small_data(4), &opts).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.params, init_params(&cfg).unwrap());
    let ck = dnl::network::Checkpoint::load(dir.path().join("final.ckpt")).unwrap();
    assert_eq!(ck.params, out.params);
    assert_eq!(ck.iteration, 0);
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig { epochs: 2, ..tiny_cfg() };
    let data = small_data(6);
    let a = train(&cfg, &data, &TrainOptions::default()).unwrap();
    let b = train(&cfg, &data, &TrainOptions::default()).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.norm_stats, b.norm_stats);
    assert_eq!(a.history, b.history);
    let c = train(&TrainConfig { seed: 1, ..cfg }, &data, &TrainOptions::default()).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    let cfg = TrainConfig { base_lr: 0.0, epochs: 2, ..tiny_cfg() };
    let out = train(&cfg, &small_data(4), &TrainOptions::default()).unwrap();
    assert_eq!(out.params, init_params(&cfg).unwrap());
    assert!(out.history.iter().all(|r| r.lr == 0.0));
}

#[test]
fn loss_decreases_over_two_hundred_steps() {
    let cfg = TrainConfig { epochs: 50, batch_size: 4, base_lr: 2e-2, ..tiny_cfg() };
    let out = train(&cfg, &small_data(16), &TrainOptions::default()).unwrap();
    assert_eq!(out.history.len(), 200);
    let mean = |rows: &[dnl::training::HistoryRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    let (head, tail) = (mean(&out.history[..20]), mean(&out.history[180..]));
    assert!(tail < head, "loss {head} -> {tail}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = TrainConfig { epochs: 3, checkpoint_every: 4, ..tiny_cfg() };
    let data = small_data(7);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), resume: None };
    let full = train(&cfg, &data, &opts).unwrap();
    let ck = dnl::network::Checkpoint::load(dir.path().join("iter_000004.ckpt")).unwrap();
    assert_eq!(ck.iteration, 4);
    let resumed = train(&cfg, &data, &TrainOptions { checkpoint_dir: None, resume: Some(ck) }).unwrap();
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.norm_stats, full.norm_stats);
    assert_eq!(resumed.optimizer.velocity, full.optimizer.velocity);
    assert_eq!(resumed.history[..], full.history[4..]);
}

#[test]
fn resume_from_final_checkpoint_is_a_no_op() {
    let cfg = tiny_cfg();
    let data = small_data(4);
    let first = train(&cfg, &data, &TrainOptions::default()).unwrap();
    let again = train(&cfg, &data, &TrainOptions { checkpoint_dir: None, resume: Some(first.checkpoint(&cfg)) }).unwrap();
    assert!(again.history.is_empty());
    assert_eq!(again.params, first.params);
}

#[test]
fn dataset_class_mismatch_is_rejected() {
    let data = generate(&ShapesSpec { num_classes: 3, height: 32, width: 32, ..ShapesSpec::default() }, 2).unwrap();
    assert!(matches!(train(&tiny_cfg(), &data, &TrainOptions::default()), Err(Error::ConfigMismatch(_))));
}

#[test]
fn batches_cover_each_epoch_once() {
    for (n, bs) in [(10, 4), (8, 8), (5, 1)] {
        let per_epoch = (n + bs - 1) / bs;
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..per_epoch).flat_map(|i| batch_indices(3, n, bs, epoch * per_epoch + i)).collect();
            seen.sort();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}

#[test]
fn evaluation_reports_consistent_numbers() {
    let cfg = tiny_cfg();
    let data = small_data(3);
    let params = init_params(&cfg).unwrap();
    let stats = ModelParams::init_norm_stats(&cfg.net);
    let report = evaluate(&params, Some(&stats), &cfg.net, &data).unwrap();
    assert_eq!(report.confusion.total(), 3 * 32 * 32);
    let pred = predict(&params, Some(&stats), &cfg.net, &data.samples[0].image).unwrap();
    assert_eq!(pred.len(), 32 * 32);
    assert!(report.to_text().contains("miou="));
}

#[test]
fn bilinear_upsampling_of_constant_and_identity() {
    let src = vec![2.5; 2 * 3 * 4];
    assert!(upsample_bilinear(&src, 2, (3, 4), (9, 8)).iter().all(|&v| (v - 2.5).abs() < 1e-15));
    let ramp: Vec<f64> = (0..12).map(f64::from).collect();
    assert_eq!(upsample_bilinear(&ramp, 1, (3, 4), (3, 4)), ramp);
}

fn confusion(pred: &[u8], truth: &[u8], classes: usize) -> MetricState {
    let mut m = MetricState::new(classes);
    m.update(pred, truth).unwrap();
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn miou_is_invariant_to_class_relabelling(
        pairs in prop::collection::vec((0u8..4, 0u8..4), 1..200),
        perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle(),
    ) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let relabel = |v: &[u8]| v.iter().map(|&c| perm[c as usize]).collect::<Vec<u8>>();
        let a = miou(&confusion(&pred, &truth, 4)).unwrap().1;
        let b = miou(&confusion(&relabel(&pred), &relabel(&truth), 4)).unwrap().1;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn miou_is_invariant_to_pixel_order(pairs in prop::collection::vec((0u8..3, 0u8..3), 1..200), seed in any::<u64>()) {
        let mut shuffled = pairs.clone();
        let mut rng = dnl::data::Rng::new(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.below(i as u64 + 1) as usize);
        }
        let (p1, t1): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let (p2, t2): (Vec<u8>, Vec<u8>) = shuffled.into_iter().unzip();
        prop_assert_eq!(confusion(&p1, &t1, 3), confusion(&p2, &t2, 3));
    }

    #[test]
    fn miou_is_within_unit_interval(pairs in prop::collection::vec((0u8..5, 0u8..5), 1..200)) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let m = miou(&confusion(&pred, &truth, 5)).unwrap().1;
        prop_assert!((0.0..=1.0).contains(&m));
    }
}

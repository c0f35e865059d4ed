use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use super::{miou, sgd_step, MetricState, OptimizerState, TrainConfig};
use crate::data::{augment, streams, Dataset, Rng, SegSample};
use crate::error::{Error, Result};
use crate::network::{joint_loss, model_forward, Checkpoint, LossWeights, ModelParams, NetConfig};
use crate::tensor::{Graph, Tensor, IGNORE_LABEL};

/// One optimizer step; `iter` counts from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss: f64,
    pub lp: f64,
    pub l1: f64,
    pub l2: f64,
    pub lgr: f64,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "iter,loss,lp,l1,l2,lgr,lr";

impl HistoryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.iter, self.loss, self.lp, self.l1, self.l2, self.lgr, self.lr
        )
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `iter_XXXXXX.ckpt` snapshots and `final.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from a saved state instead of initializing.
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Running normalization statistics used at evaluation.
    pub norm_stats: ModelParams,
    pub optimizer: OptimizerState,
    /// Rows for the steps taken by this call only.
    pub history: Vec<HistoryRow>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            config_text: cfg.to_text(),
            iteration: self.optimizer.iter as u64,
            params: self.params.clone(),
            velocity: Some(self.optimizer.velocity.clone()),
            norm_stats: Some(self.norm_stats.clone()),
        }
    }
}

/// Rejects datasets the network cannot consume.
pub fn check_dataset(cfg: &NetConfig, data: &Dataset) -> Result<()> {
    if data.samples.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if data.spec.num_classes != cfg.num_classes {
        return Err(Error::ConfigMismatch(format!(
            "dataset has {} classes, model expects {}",
            data.spec.num_classes, cfg.num_classes
        )));
    }
    for s in &data.samples {
        if s.image.shape()[0] != cfg.image_channels {
            return Err(Error::Data(format!("{}: {} image channels, expected {}", s.id, s.image.shape()[0], cfg.image_channels)));
        }
        if let Some(&bad) = s.labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= cfg.num_classes) {
            return Err(Error::Data(format!("{}: label {bad} out of range", s.id)));
        }
    }
    Ok(())
}

/// Stacks equally sized samples into `B×C×H×W` plus concatenated labels.
pub fn collate(samples: &[SegSample]) -> Result<(Tensor, Vec<u8>, (usize, usize))> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (c, h, w) = (first.image.shape()[0], first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::dim(format!("batch mixes {:?} and {:?}", first.image.shape(), s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::new(vec![samples.len(), c, h, w], data)?, labels, (h, w)))
}

/// Loss terms and gradients for one batch at the given parameters.
pub fn loss_and_grads(params: &ModelParams, cfg: &NetConfig, batch: &[SegSample]) -> Result<(HistoryRow, Vec<Tensor>)> {
    training_step(params, cfg, batch, None)
}

/// [`loss_and_grads`], also folding the batch statistics into `stats`.
fn training_step(
    params: &ModelParams,
    cfg: &NetConfig,
    batch: &[SegSample],
    stats: Option<(&mut ModelParams, f64)>,
) -> Result<(HistoryRow, Vec<Tensor>)> {
    let (images, labels, hw) = collate(batch)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let img = g.constant(images);
    let out = model_forward(&mut g, &bound, img, cfg)?;
    let terms = joint_loss(&mut g, &out, &labels, hw, LossWeights::from(cfg))?;
    let (loss, lp, l1, l2, lgr) = terms.values(&g);
    let row = HistoryRow { iter: 0, loss, lp, l1, l2, lgr, lr: 0.0 };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss: total {loss}, lp {lp}, l1 {l1}, l2 {l2}, lgr {lgr}")));
    }
    g.backward(terms.total)?;
    if let Some((stats, momentum)) = stats {
        stats.update_norm_stats(&g, &bound, momentum)?;
    }
    Ok((row, bound.grads(&g)))
}

/// Sample indices for step `iter` (0-based): a fresh permutation each epoch,
/// cut into consecutive batches; the last batch of an epoch may be short.
pub fn batch_indices(seed: u64, samples: usize, batch_size: usize, iter: usize) -> Vec<usize> {
    let per_epoch = samples.div_ceil(batch_size);
    let (epoch, pos) = (iter / per_epoch, iter % per_epoch);
    let base = Rng::stream(seed, streams::BATCHES).next_u64();
    let mut order: Vec<usize> = (0..samples).collect();
    Rng::stream(base, epoch as u64).shuffle(&mut order);
    let start = pos * batch_size;
    order[start..(start + batch_size).min(samples)].to_vec()
}

fn augmented_batch(cfg: &TrainConfig, data: &Dataset, iter: usize) -> Vec<SegSample> {
    let idx = batch_indices(cfg.seed, data.samples.len(), cfg.batch_size, iter);
    let base = Rng::stream(cfg.seed, streams::AUGMENT).next_u64();
    let ops = cfg.augment_ops();
    idx.par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let mut rng = Rng::stream(base, (iter * cfg.batch_size + slot) as u64);
            augment(&data.samples[i], &ops, &mut rng)
        })
        .collect()
}

pub fn init_params(cfg: &TrainConfig) -> Result<ModelParams> {
    ModelParams::init(&cfg.net, &mut Rng::stream(cfg.seed, streams::INIT))
}

fn save_checkpoint(
    dir: &Path,
    name: &str,
    cfg: &TrainConfig,
    params: &ModelParams,
    stats: &ModelParams,
    opt: &OptimizerState,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Checkpoint {
        config_text: cfg.to_text(),
        iteration: opt.iter as u64,
        params: params.clone(),
        velocity: Some(opt.velocity.clone()),
        norm_stats: Some(stats.clone()),
    }
    .save(dir.join(name))
}

/// Runs SGD over `data` for `cfg.epochs` epochs. Every random choice is a
/// function of `(seed, iteration)`, so a resumed run matches an
/// uninterrupted one bitwise.
pub fn train(cfg: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(&cfg.net, data)?;
    let max_iter = cfg.max_iter(data.samples.len());

    let (mut params, mut stats, mut opt) = match &opts.resume {
        Some(ck) => {
            ck.params.check_against(&cfg.net)?;
            let mut opt = OptimizerState::new(&ck.params, cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.power, max_iter);
            if let Some(v) = &ck.velocity {
                v.check_against(&cfg.net)?;
                opt.velocity = v.clone();
            }
            opt.iter = usize::try_from(ck.iteration).map_err(|_| Error::Corrupt("iteration overflow".into()))?;
            if opt.iter > max_iter {
                return Err(Error::config(format!("checkpoint at iteration {} is past max_iter {max_iter}", opt.iter)));
            }
            let stats = match &ck.norm_stats {
                Some(s) => {
                    s.check_norm_stats(&cfg.net)?;
                    s.clone()
                }
                None => ModelParams::init_norm_stats(&cfg.net),
            };
            (ck.params.clone(), stats, opt)
        }
        None => {
            let params = init_params(cfg)?;
            let opt = OptimizerState::new(&params, cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.power, max_iter);
            (params, ModelParams::init_norm_stats(&cfg.net), opt)
        }
    };

    let mut history = Vec::with_capacity(max_iter - opt.iter);
    while opt.iter < max_iter {
        let iter = opt.iter;
        let batch = augmented_batch(cfg, data, iter);
        let (mut row, grads) =
            training_step(&params, &cfg.net, &batch, Some((&mut stats, cfg.norm_momentum))).map_err(|e| annotate(e, iter + 1))?;
        row.lr = sgd_step(&mut params, &grads, &mut opt).map_err(|e| annotate(e, iter + 1))?;
        row.iter = opt.iter;
        history.push(row);
        if opt.iter % 50 == 0 || opt.iter == max_iter {
            info!("iter {}/{max_iter} loss {:.5} lr {:.3e}", opt.iter, row.loss, row.lr);
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && opt.iter % cfg.checkpoint_every == 0 && opt.iter < max_iter {
                save_checkpoint(dir, &format!("iter_{:06}.ckpt", opt.iter), cfg, &params, &stats, &opt)?;
            }
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(dir, "final.ckpt", cfg, &params, &stats, &opt)?;
    }
    Ok(TrainOutcome { params, norm_stats: stats, optimizer: opt, history })
}

fn annotate(e: Error, iter: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("iteration {iter}: {m}")),
        other => other,
    }
}

/// Per-pixel argmax labels at image resolution for one `C×H×W` image.
/// Normalization uses `norm_stats` when given, else the image's own
/// statistics.
pub fn predict(params: &ModelParams, norm_stats: Option<&ModelParams>, cfg: &NetConfig, image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::dim(format!("expected C×H×W image, got {:?}", image.shape())));
    };
    let mut g = Graph::new();
    let mut bound = params.bind(&mut g, false);
    if let Some(stats) = norm_stats {
        bound = bound.with_norm_stats(stats);
    }
    let img = g.constant(image.reshape(vec![1, c, h, w])?);
    let out = model_forward(&mut g, &bound, img, cfg)?;
    let logits = g.value(out.logits);
    let &[_, nc, lh, lw] = logits.shape() else {
        return Err(Error::dim("logits must be rank 4"));
    };
    let up = upsample_bilinear(logits.data(), nc, (lh, lw), (h, w));
    let area = h * w;
    Ok((0..area)
        .map(|pos| {
            let mut best = 0;
            for k in 1..nc {
                if up[k * area + pos] > up[best * area + pos] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

/// Bilinear resize of `c` planes with half-pixel centres and clamped edges.
pub fn upsample_bilinear(src: &[f64], c: usize, from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    let ((sh, sw), (th, tw)) = (from, to);
    let axis = |t: usize, s: usize, n: usize| {
        let f = ((t as f64 + 0.5) * s as f64 / n as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = f.floor() as usize;
        (i0, (i0 + 1).min(s - 1), f - i0 as f64)
    };
    let ys: Vec<_> = (0..th).map(|y| axis(y, sh, th)).collect();
    let xs: Vec<_> = (0..tw).map(|x| axis(x, sw, tw)).collect();
    let mut out = vec![0.0; c * th * tw];
    for k in 0..c {
        let plane = &src[k * sh * sw..(k + 1) * sh * sw];
        for (y, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = plane[y0 * sw + x0] * (1.0 - tx) + plane[y0 * sw + x1] * tx;
                let bottom = plane[y1 * sw + x0] * (1.0 - tx) + plane[y1 * sw + x1] * tx;
                out[(k * th + y) * tw + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    pub confusion: MetricState,
}

impl EvalReport {
    /// Aligned table followed by `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from("class      IoU\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            let cell = iou.map_or_else(|| "     n/a".to_string(), |v| format!("{:8.4}", v));
            let _ = writeln!(out, "{c:>5} {cell}");
        }
        let _ = writeln!(out, "miou={:.6}", self.miou);
        let _ = writeln!(out, "pixel_accuracy={:.6}", self.pixel_accuracy);
        for (c, iou) in self.per_class.iter().enumerate() {
            let _ = writeln!(out, "iou.{c}={}", iou.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}")));
        }
        out
    }
}

/// Single-scale evaluation, one image per forward pass; logits are
/// bilinearly resized to label resolution before the argmax.
pub fn evaluate(params: &ModelParams, norm_stats: Option<&ModelParams>, cfg: &NetConfig, data: &Dataset) -> Result<EvalReport> {
    params.check_against(cfg)?;
    if let Some(stats) = norm_stats {
        stats.check_norm_stats(cfg)?;
    }
    check_dataset(cfg, data)?;
    let parts = data
        .samples
        .par_iter()
        .map(|s| {
            let pred = predict(params, norm_stats, cfg, &s.image)?;
            let mut m = MetricState::new(cfg.num_classes);
            m.update(&pred, &s.labels)?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = MetricState::new(cfg.num_classes);
    for p in &parts {
        confusion.merge(p)?;
    }
    let (per_class, mean) = miou(&confusion)?;
    let pixel_accuracy = confusion.pixel_accuracy().unwrap_or(0.0);
    Ok(EvalReport { miou: mean, per_class, pixel_accuracy, confusion })
}

//! The segmentation network around the denoised non-local operator.
//!
//! Layout (strides relative to the input image):
//!
//! ```text
//! image ─ stem s2 ─ stem s4 (res2) ─ stem s8 (res3) ─ dilated stem s8 ─ X
//! X ─ 1×1 reduce ─ basic block (3×3 s2, 3×3, strided 1×1 skip) ─ F      (s16)
//! F ─ denoised NL ─ F'
//! [X ; up2(F') ; broadcast(1×1(gap(X)))] ─ 3×3 ─ norm ─ ReLU ─ 1×1 ─ logits (s8)
//! res2 ─ 1×1 ─ aux2 logits,   res3 ─ 1×1 ─ aux3 logits
//! ```

mod checkpoint;
mod flops;
mod model;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use flops::{count_flops, BlockCost, FlopReport};
pub use model::{
    head_forward, joint_loss, model_forward, reduction_forward, stem_forward, LossTerms, LossWeights, ModelOutput,
};

use std::cell::RefCell;

use indexmap::IndexMap;

use crate::attention::{AttentionParams, DenoisedNLConfig};
use crate::config::KeyValues;
use crate::data::Rng;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub image_channels: usize,
    /// Output widths of the four stem stages.
    pub stem_widths: [usize; 4],
    /// Channels `C` of the attention input `F`.
    pub channels: usize,
    /// Query/key channels `C'`.
    pub reduced_channels: usize,
    pub num_classes: usize,
    /// Local retention window `k`.
    pub window: usize,
    pub head_channels: usize,
    pub norm_eps: f64,
    /// Weight of the res2 auxiliary loss.
    pub lambda1: f64,
    /// Weight of the res3 auxiliary loss.
    pub lambda2: f64,
    /// Weight of the coarse-prediction loss feeding global rectifying.
    pub lambda_gr: f64,
    pub gamma_init: f64,
    pub global_rectify: bool,
    pub local_retention: bool,
    pub coarse_softmax: bool,
    pub force_pclass_ones: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            stem_widths: [16, 32, 64, 64],
            channels: 64,
            reduced_channels: 8,
            num_classes: 4,
            window: 3,
            head_channels: 64,
            norm_eps: 1e-5,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_gr: 0.4,
            gamma_init: 0.0,
            global_rectify: true,
            local_retention: true,
            coarse_softmax: false,
            force_pclass_ones: false,
        }
    }
}

pub(crate) const NET_KEYS: &[&str] = &[
    "image_channels",
    "stem_widths",
    "channels",
    "reduced_channels",
    "num_classes",
    "window",
    "head_channels",
    "norm_eps",
    "lambda1",
    "lambda2",
    "lambda_gr",
    "gamma_init",
    "global_rectify",
    "local_retention",
    "coarse_softmax",
    "force_pclass_ones",
];

impl NetConfig {
    pub fn attention(&self) -> DenoisedNLConfig {
        DenoisedNLConfig {
            channels: self.channels,
            reduced_channels: self.reduced_channels,
            num_classes: self.num_classes,
            window: self.window,
            gamma_init: self.gamma_init,
            global_rectify: self.global_rectify,
            local_retention: self.local_retention,
            coarse_softmax: self.coarse_softmax,
            force_pclass_ones: self.force_pclass_ones,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.stem_widths.contains(&0) || self.head_channels == 0 {
            return Err(Error::config("network widths must be positive"));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::config("num_classes must be in 1..=254"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda_gr < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be positive"));
        }
        self.attention().validate()
    }

    /// Reads network keys from `kv`, defaulting any that are absent.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let stem_widths = match kv.get_list::<usize>("stem_widths")? {
            None => d.stem_widths,
            Some(v) => v
                .try_into()
                .map_err(|_| Error::config("stem_widths needs exactly four entries"))?,
        };
        let channels = kv.get_or("channels", d.channels)?;
        let cfg = Self {
            image_channels: kv.get_or("image_channels", d.image_channels)?,
            stem_widths,
            channels,
            reduced_channels: kv.get_or("reduced_channels", (channels / 8).max(1))?,
            num_classes: kv.get_or("num_classes", d.num_classes)?,
            window: kv.get_or("window", d.window)?,
            head_channels: kv.get_or("head_channels", d.head_channels)?,
            norm_eps: kv.get_or("norm_eps", d.norm_eps)?,
            lambda1: kv.get_or("lambda1", d.lambda1)?,
            lambda2: kv.get_or("lambda2", d.lambda2)?,
            lambda_gr: kv.get_or("lambda_gr", d.lambda_gr)?,
            gamma_init: kv.get_or("gamma_init", d.gamma_init)?,
            global_rectify: kv.get_or("global_rectify", d.global_rectify)?,
            local_retention: kv.get_or("local_retention", d.local_retention)?,
            coarse_softmax: kv.get_or("coarse_softmax", d.coarse_softmax)?,
            force_pclass_ones: kv.get_or("force_pclass_ones", d.force_pclass_ones)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("image_channels", self.image_channels);
        let w = self.stem_widths;
        kv.set("stem_widths", format!("{},{},{},{}", w[0], w[1], w[2], w[3]));
        kv.set("channels", self.channels);
        kv.set("reduced_channels", self.reduced_channels);
        kv.set("num_classes", self.num_classes);
        kv.set("window", self.window);
        kv.set("head_channels", self.head_channels);
        kv.set("norm_eps", self.norm_eps);
        kv.set("lambda1", self.lambda1);
        kv.set("lambda2", self.lambda2);
        kv.set("lambda_gr", self.lambda_gr);
        kv.set("gamma_init", self.gamma_init);
        kv.set("global_rectify", self.global_rectify);
        kv.set("local_retention", self.local_retention);
        kv.set("coarse_softmax", self.coarse_softmax);
        kv.set("force_pclass_ones", self.force_pclass_ones);
    }

    /// Ordered `(name, shape)` list of every learnable tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: &str, shape: &[usize]| out.push((name.to_string(), shape.to_vec()));
        let w = self.stem_widths;
        let (c, cr, cn, hc) = (self.channels, self.reduced_channels, self.num_classes, self.head_channels);
        let mut prev = self.image_channels;
        for (i, &width) in w.iter().enumerate() {
            push(&format!("stem.{i}.conv.weight"), &[width, prev, 3, 3]);
            push(&format!("stem.{i}.norm.weight"), &[width]);
            push(&format!("stem.{i}.norm.bias"), &[width]);
            prev = width;
        }
        push("reduce.conv.weight", &[c, w[3], 1, 1]);
        push("reduce.norm.weight", &[c]);
        push("reduce.norm.bias", &[c]);
        push("block.conv1.weight", &[c, c, 3, 3]);
        push("block.norm1.weight", &[c]);
        push("block.norm1.bias", &[c]);
        push("block.conv2.weight", &[c, c, 3, 3]);
        push("block.norm2.weight", &[c]);
        push("block.norm2.bias", &[c]);
        push("block.skip.weight", &[c, c, 1, 1]);
        push("dnl.query.weight", &[cr, c, 1, 1]);
        push("dnl.query.bias", &[cr]);
        push("dnl.key.weight", &[cr, c, 1, 1]);
        push("dnl.key.bias", &[cr]);
        push("dnl.value.weight", &[c, c, 1, 1]);
        push("dnl.value.bias", &[c]);
        push("dnl.coarse.weight", &[cn, c, 1, 1]);
        push("dnl.coarse.bias", &[cn]);
        push("dnl.gamma", &[1]);
        push("context.weight", &[c, w[3], 1, 1]);
        push("context.bias", &[c]);
        push("head.conv.weight", &[hc, w[3] + 2 * c, 3, 3]);
        push("head.norm.weight", &[hc]);
        push("head.norm.bias", &[hc]);
        push("head.cls.weight", &[cn, hc, 1, 1]);
        push("head.cls.bias", &[cn]);
        push("aux2.weight", &[cn, w[1], 1, 1]);
        push("aux2.bias", &[cn]);
        push("aux3.weight", &[cn, w[2], 1, 1]);
        push("aux3.bias", &[cn]);
        out
    }

    /// Prefixes of the normalization layers, in forward order.
    pub fn norm_prefixes(&self) -> Vec<String> {
        self.param_shapes()
            .into_iter()
            .filter_map(|(name, _)| name.strip_suffix(".weight").filter(|p| p.contains("norm")).map(str::to_string))
            .collect()
    }

    /// Closed-form count of learnable scalars.
    pub fn param_census(&self) -> usize {
        let w = self.stem_widths;
        let (c, cr, cn, hc) = (self.channels, self.reduced_channels, self.num_classes, self.head_channels);
        let stem = 9 * (self.image_channels * w[0] + w[0] * w[1] + w[1] * w[2] + w[2] * w[3])
            + 2 * (w[0] + w[1] + w[2] + w[3]);
        let reduction = w[3] * c + 2 * c + 2 * (9 * c * c + 2 * c) + c * c;
        let attention = 2 * (cr * c + cr) + (c * c + c) + (cn * c + cn) + 1;
        let context = w[3] * c + c;
        let head = 9 * hc * (w[3] + 2 * c) + 2 * hc + hc * cn + cn;
        let aux = (w[1] + 1) * cn + (w[2] + 1) * cn;
        stem + reduction + attention + context + head + aux
    }
}

/// Named learnable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    /// He-normal conv weights, unit norm scales, zero biases, `γ = gamma_init`.
    pub fn init(cfg: &NetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = IndexMap::new();
        for (name, shape) in cfg.param_shapes() {
            let numel: usize = shape.iter().product();
            let data = if name == "dnl.gamma" {
                vec![cfg.gamma_init]
            } else if name.ends_with("norm.weight") || name.ends_with("norm1.weight") || name.ends_with("norm2.weight") {
                vec![1.0; numel]
            } else if shape.len() == 4 {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| std * rng.normal()).collect()
            } else {
                vec![0.0; numel]
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self { tensors: entries.into_iter().collect() }
    }

    /// Checks names and shapes against the architecture.
    pub fn check_against(&self, cfg: &NetConfig) -> Result<()> {
        let expected = cfg.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (have_name, have)) in expected.iter().zip(&self.tensors) {
            if name != have_name || shape.as_slice() != have.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {have_name} {:?} does not match expected {name} {shape:?}",
                    have.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    /// Zeroes the final classifier and both auxiliary heads.
    pub fn zero_heads(&mut self) {
        for name in ["head.cls.weight", "head.cls.bias", "aux2.weight", "aux2.bias", "aux3.weight", "aux3.bias"] {
            if let Some(t) = self.tensors.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Places every tensor on `g`, as gradient-receiving leaves when
    /// `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars, norm_stats: None, norm_taps: RefCell::new(Vec::new()) }
    }

    /// Running normalization statistics: `{prefix}.running_mean` zeros and
    /// `{prefix}.running_var` ones for every normalization layer.
    pub fn init_norm_stats(cfg: &NetConfig) -> Self {
        let widths: IndexMap<String, usize> = cfg
            .param_shapes()
            .into_iter()
            .filter_map(|(name, shape)| name.strip_suffix(".weight").map(|p| (p.to_string(), shape[0])))
            .collect();
        let mut tensors = IndexMap::new();
        for prefix in cfg.norm_prefixes() {
            let c = widths[&prefix];
            tensors.insert(format!("{prefix}.running_mean"), Tensor::zeros(vec![c]));
            tensors.insert(format!("{prefix}.running_var"), Tensor::full(vec![c], 1.0));
        }
        Self { tensors }
    }

    /// Checks names and shapes against [`ModelParams::init_norm_stats`].
    pub fn check_norm_stats(&self, cfg: &NetConfig) -> Result<()> {
        let expected = Self::init_norm_stats(cfg);
        let same = expected.tensors.len() == self.tensors.len()
            && expected.iter().zip(self.iter()).all(|((n, t), (m, u))| n == m && t.shape() == u.shape());
        if same {
            Ok(())
        } else {
            Err(Error::ConfigMismatch("normalization statistics do not match the architecture".into()))
        }
    }

    /// Folds the batch statistics recorded in `bound` into the running
    /// estimates: `r ← (1 − momentum)·r + momentum·batch`, with the unbiased
    /// batch variance.
    pub fn update_norm_stats(&mut self, g: &Graph, bound: &BoundParams, momentum: f64) -> Result<()> {
        for (prefix, v) in bound.norm_taps() {
            let (mean, var) = g
                .batch_stats(v)
                .ok_or_else(|| Error::config(format!("{prefix} was not batch-normalized")))?;
            let shape = g.shape(v);
            let count = (shape.iter().product::<usize>() / shape[1]) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for (key, batch, scale) in [("running_mean", mean, 1.0), ("running_var", var, unbias)] {
                let name = format!("{prefix}.{key}");
                let r = self
                    .tensors
                    .get_mut(&name)
                    .ok_or_else(|| Error::config(format!("missing statistic {name}")))?;
                for (r, b) in r.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * scale * b;
                }
            }
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ModelParams`], in the same order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
    norm_stats: Option<ModelParams>,
    norm_taps: RefCell<Vec<(String, Var)>>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    /// Normalize with these running statistics instead of batch statistics.
    pub fn with_norm_stats(mut self, stats: &ModelParams) -> Self {
        self.norm_stats = Some(stats.clone());
        self
    }

    /// Running `(mean, var)` of a normalization layer, if bound.
    pub fn running_stats(&self, prefix: &str) -> Result<Option<(&[f64], &[f64])>> {
        let Some(stats) = &self.norm_stats else { return Ok(None) };
        let get = |key: &str| {
            stats
                .get(&format!("{prefix}.{key}"))
                .map(Tensor::data)
                .ok_or_else(|| Error::config(format!("missing statistic {prefix}.{key}")))
        };
        Ok(Some((get("running_mean")?, get("running_var")?)))
    }

    pub(crate) fn record_norm(&self, prefix: &str, v: Var) {
        self.norm_taps.borrow_mut().push((prefix.to_string(), v));
    }

    /// Batch-normalized outputs produced so far, by layer prefix.
    pub fn norm_taps(&self) -> Vec<(String, Var)> {
        self.norm_taps.borrow().clone()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn attention(&self) -> Result<AttentionParams> {
        Ok(AttentionParams {
            query_weight: self.var("dnl.query.weight")?,
            query_bias: self.var("dnl.query.bias")?,
            key_weight: self.var("dnl.key.weight")?,
            key_bias: self.var("dnl.key.bias")?,
            value_weight: self.var("dnl.value.weight")?,
            value_bias: self.var("dnl.value.bias")?,
            coarse_weight: self.var("dnl.coarse.weight")?,
            coarse_bias: self.var("dnl.coarse.bias")?,
            gamma: self.var("dnl.gamma")?,
        })
    }

    /// Gradients in parameter order, zero-filled where none arrived.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars.values().map(|&v| g.grad_tensor(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn census_matches_shapes() {
        for cfg in [
            NetConfig::default(),
            NetConfig { stem_widths: [4, 6, 8, 10], channels: 12, reduced_channels: 3, num_classes: 5, head_channels: 7, ..NetConfig::default() },
        ] {
            let params = ModelParams::init(&cfg, &mut Rng::new(1)).unwrap();
            assert_eq!(params.total_elements(), cfg.param_census());
            params.check_against(&cfg).unwrap();
            assert!(params.all_finite());
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = NetConfig::default();
        let a = ModelParams::init(&cfg, &mut Rng::new(9)).unwrap();
        let b = ModelParams::init(&cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get("dnl.gamma").unwrap().data(), &[0.0]);
    }

    #[test]
    fn kv_round_trip() {
        let cfg = NetConfig { num_classes: 6, global_rectify: false, lambda_gr: 0.0, ..NetConfig::default() };
        let mut kv = KeyValues::new();
        cfg.write_kv(&mut kv);
        assert_eq!(NetConfig::from_kv(&kv).unwrap(), cfg);
    }

    #[test]
    fn negative_loss_weight_is_rejected() {
        let cfg = NetConfig { lambda1: -1.0, ..NetConfig::default() };
        assert!(cfg.validate().is_err());
    }
}

//! The denoised non-local operator.
//!
//! Given a feature map `F` (`C×H×W`, `N = H·W` positions) the operator
//! computes
//!
//! ```text
//! Q = W_q F   (N×C')      K = W_k F   (C'×N)      V = W_v F   (N×C)
//! A       = softmax_rows(Q K)                       raw attention
//! P_class = sigmoid(P_coarseᵀ P_coarse)             P_coarse = W_c F  (C_n×N)
//! A'      = A ⊙ P_class                             inter-class denoising
//! S_l[j]  = sigmoid(Q_j · K_window(j))              N×k²
//! A''[q][j] = Σ_u S_l[j][u] · A'[q][window_u(j)]    intra-class denoising
//! F'      = γ · (A'' V) + F
//! ```
//!
//! The local window slides over the key axis of `A'`: each query's attention
//! map, viewed as an `H×W` image, is smoothed with per-key weights. Neither
//! `A'` nor `A''` is renormalised.

use crate::error::{Error, Result};
use crate::tensor::{kernels, ConvSpec, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisedNLConfig {
    /// Input/output channels `C`.
    pub channels: usize,
    /// Query/key channels `C'`.
    pub reduced_channels: usize,
    /// Classes `C_n` predicted by the coarse head.
    pub num_classes: usize,
    /// Local retention window `k` (odd).
    pub window: usize,
    pub gamma_init: f64,
    /// Enable the global rectifying block (`A' = A ⊙ P_class`).
    pub global_rectify: bool,
    /// Enable the local retention block.
    pub local_retention: bool,
    /// Feed softmax-normalised class probabilities into the Gram product
    /// instead of raw logits.
    pub coarse_softmax: bool,
    /// Debug: replace `P_class` with all ones.
    pub force_pclass_ones: bool,
}

impl DenoisedNLConfig {
    /// `C' = C/8` (at least 1), `k = 3`, `γ = 0`, both blocks on.
    pub fn new(channels: usize, num_classes: usize) -> Self {
        Self {
            channels,
            reduced_channels: (channels / 8).max(1),
            num_classes,
            window: 3,
            gamma_init: 0.0,
            global_rectify: true,
            local_retention: true,
            coarse_softmax: false,
            force_pclass_ones: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduced_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("attention channel and class counts must be positive"));
        }
        if self.reduced_channels >= self.channels {
            return Err(Error::config(format!(
                "reduced channels C'={} must be below C={}",
                self.reduced_channels, self.channels
            )));
        }
        kernels::check_window(self.window)
    }
}

/// Graph handles for the operator's learnable tensors.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query_weight: Var,
    pub query_bias: Var,
    pub key_weight: Var,
    pub key_bias: Var,
    pub value_weight: Var,
    pub value_bias: Var,
    pub coarse_weight: Var,
    pub coarse_bias: Var,
    pub gamma: Var,
}

/// Snapshot of every intermediate map of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    /// Raw attention `A`, `N×N`, rows sum to one.
    pub a: Tensor,
    /// After global rectifying (equals `a` when the block is disabled).
    pub a_prime: Tensor,
    /// After local retention (equals `a_prime` when the block is disabled).
    pub a_dprime: Tensor,
    /// `N×N` same-class map; `None` when global rectifying is disabled.
    pub p_class: Option<Tensor>,
    /// `N×k²` local similarities; `None` when local retention is disabled.
    pub s_l: Option<Tensor>,
    pub height: usize,
    pub width: usize,
}

/// Graph handles produced by [`denoised_nl_forward`].
#[derive(Clone, Copy, Debug)]
pub struct DenoisedNLOutput {
    /// Augmented feature `F'`, `C×H×W`.
    pub output: Var,
    pub a: Var,
    pub a_prime: Var,
    pub a_dprime: Var,
    pub p_class: Option<Var>,
    pub s_l: Option<Var>,
    /// Coarse class logits `C_n×N`; present when global rectifying is on.
    pub p_coarse: Option<Var>,
    pub height: usize,
    pub width: usize,
}

impl DenoisedNLOutput {
    pub fn state(&self, g: &Graph) -> AttentionState {
        AttentionState {
            a: g.value(self.a).clone(),
            a_prime: g.value(self.a_prime).clone(),
            a_dprime: g.value(self.a_dprime).clone(),
            p_class: self.p_class.map(|v| g.value(v).clone()),
            s_l: self.s_l.map(|v| g.value(v).clone()),
            height: self.height,
            width: self.width,
        }
    }
}

/// `A = softmax_rows(Q·K)` for `Q: N×C'`, `K: C'×N`.
pub fn pairwise_attention(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let (n, c) = kernels::expect_matrix(g.shape(q), "query")?;
    let (c2, n2) = kernels::expect_matrix(g.shape(k), "key")?;
    if c != c2 || n != n2 || n == 0 {
        return Err(Error::dim(format!("query {:?} and key {:?} disagree", g.shape(q), g.shape(k))));
    }
    let logits = g.matmul(q, k)?;
    g.softmax_rows(logits)
}

/// 1×1 projection reshaped to `channels × N`.
fn project(g: &mut Graph, f: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let (c, h, w) = kernels::expect_chw(g.shape(f), "feature")?;
    let out = g.shape(weight).first().copied().unwrap_or(0);
    let mut y = g.conv2d(f, weight, &ConvSpec::pointwise(c, out))?;
    if let Some(b) = bias {
        y = g.channel_bias(y, b)?;
    }
    g.reshape(y, vec![out, h * w])
}

/// Coarse class logits `C_n×N` from a 1×1 convolution of `F`.
pub fn coarse_predict(g: &mut Graph, f: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    project(g, f, weight, bias)
}

/// `P_class = sigmoid(P_coarseᵀ · P_coarse)`.
pub fn global_rectify(g: &mut Graph, p_coarse: Var) -> Result<Var> {
    kernels::expect_matrix(g.shape(p_coarse), "coarse logits")?;
    let pt = g.transpose(p_coarse)?;
    let gram = g.matmul(pt, p_coarse)?;
    Ok(g.sigmoid(gram))
}

/// `S_l[p][u] = sigmoid(Q_p · K_unfolded[p][·][u])`, shape `N×k²`.
pub fn local_similarity(g: &mut Graph, q: Var, k_unfolded: Var) -> Result<Var> {
    let (n, c) = kernels::expect_matrix(g.shape(q), "query")?;
    let &[n2, c2, kk] = g.shape(k_unfolded) else {
        return Err(Error::dim(format!("unfolded key must be N×C'×k², got {:?}", g.shape(k_unfolded))));
    };
    if n != n2 || c != c2 {
        return Err(Error::dim(format!("query {:?} vs unfolded key {:?}", g.shape(q), g.shape(k_unfolded))));
    }
    let q3 = g.reshape(q, vec![n, 1, c])?;
    let dots = g.bmm(q3, k_unfolded)?;
    let dots = g.reshape(dots, vec![n, kk])?;
    Ok(g.sigmoid(dots))
}

/// `A' = A ⊙ P_class`.
pub fn apply_global_rectify(g: &mut Graph, a: Var, p_class: Var) -> Result<Var> {
    g.mul(a, p_class)
}

/// `A''[q][j] = Σ_u S_l[j][u] · A'[q][window_u(j)]` over the `H×W` key grid,
/// with zero contribution from windows hanging off the image.
pub fn local_retention(g: &mut Graph, a_prime: Var, s_l: Var, k: usize, h: usize, w: usize) -> Result<Var> {
    kernels::check_window(k)?;
    let (nq, nk) = kernels::expect_matrix(g.shape(a_prime), "attention")?;
    if nk != h * w {
        return Err(Error::dim(format!("attention has {nk} keys but grid is {h}×{w}")));
    }
    if g.shape(s_l) != [nk, k * k] {
        return Err(Error::dim(format!("S_l {:?} should be {nk}×{}", g.shape(s_l), k * k)));
    }
    // Each query row becomes one channel of an H×W image; unfolding gives
    // windows[j][q][u] = A'[q][window_u(j)].
    let maps = g.reshape(a_prime, vec![nq, h, w])?;
    let windows = g.unfold(maps, k)?;
    let weights = g.reshape(s_l, vec![nk, k * k, 1])?;
    let smoothed = g.bmm(windows, weights)?;
    let smoothed = g.reshape(smoothed, vec![nk, nq])?;
    g.transpose(smoothed)
}

/// `F'_j = γ · Σ_i A''[j][i] V_i + F_j`, returned as `C×H×W`.
pub fn aggregate(g: &mut Graph, a_dprime: Var, v: Var, f: Var, gamma: Var) -> Result<Var> {
    let (c, h, w) = kernels::expect_chw(g.shape(f), "feature")?;
    let (n, cv) = kernels::expect_matrix(g.shape(v), "value")?;
    if n != h * w || cv != c {
        return Err(Error::dim(format!("value {:?} does not match feature {:?}", g.shape(v), g.shape(f))));
    }
    let mixed = g.matmul(a_dprime, v)?;
    let mixed = g.transpose(mixed)?;
    let mixed = g.reshape(mixed, vec![c, h, w])?;
    let scaled = g.scale_by(mixed, gamma)?;
    g.add(scaled, f)
}

/// Full operator on one `C×H×W` feature map.
pub fn denoised_nl_forward(
    g: &mut Graph,
    f: Var,
    params: &AttentionParams,
    cfg: &DenoisedNLConfig,
) -> Result<DenoisedNLOutput> {
    cfg.validate()?;
    let (c, h, w) = kernels::expect_chw(g.shape(f), "feature")?;
    if c != cfg.channels {
        return Err(Error::dim(format!("feature has {c} channels, config says {}", cfg.channels)));
    }
    let n = h * w;
    let cr = cfg.reduced_channels;

    let q = project(g, f, params.query_weight, Some(params.query_bias))?;
    let q = g.transpose(q)?;
    let k = project(g, f, params.key_weight, Some(params.key_bias))?;
    let v = project(g, f, params.value_weight, Some(params.value_bias))?;
    let v = g.transpose(v)?;

    let a = pairwise_attention(g, q, k)?;

    let (a_prime, p_class, p_coarse) = if cfg.global_rectify {
        let logits = coarse_predict(g, f, params.coarse_weight, Some(params.coarse_bias))?;
        let gram_input = if cfg.coarse_softmax {
            let per_pixel = g.transpose(logits)?;
            let probs = g.softmax_rows(per_pixel)?;
            g.transpose(probs)?
        } else {
            logits
        };
        let p_class = if cfg.force_pclass_ones {
            g.constant(Tensor::ones(vec![n, n]))
        } else {
            global_rectify(g, gram_input)?
        };
        (apply_global_rectify(g, a, p_class)?, Some(p_class), Some(logits))
    } else {
        (a, None, None)
    };

    let (a_dprime, s_l) = if cfg.local_retention {
        let k_map = g.reshape(k, vec![cr, h, w])?;
        let k_unfolded = g.unfold(k_map, cfg.window)?;
        let s_l = local_similarity(g, q, k_unfolded)?;
        (local_retention(g, a_prime, s_l, cfg.window, h, w)?, Some(s_l))
    } else {
        (a_prime, None)
    };

    let output = aggregate(g, a_dprime, v, f, params.gamma)?;
    Ok(DenoisedNLOutput { output, a, a_prime, a_dprime, p_class, s_l, p_coarse, height: h, width: w })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], seed: u64) -> Var {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i as u64 * 7919 + seed * 104729) % 1000) as f64 / 500.0 - 1.0).collect();
        g.param(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn zero_logits_give_uniform_attention() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(vec![4, 2]));
        let k = g.constant(Tensor::zeros(vec![2, 4]));
        let a = pairwise_attention(&mut g, q, k).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap());
        let k = g.constant(Tensor::new(vec![2, 1], vec![0.5, 2.0]).unwrap());
        let a = pairwise_attention(&mut g, q, k).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
    }

    #[test]
    fn zero_coarse_logits_give_half() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(vec![3, 5]));
        let pc = global_rectify(&mut g, p).unwrap();
        assert!(g.value(pc).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn one_hot_coarse_logits() {
        // Columns 0 and 1 are class 0, column 2 is class 1.
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let pc = global_rectify(&mut g, p).unwrap();
        let v = g.value(pc);
        let s1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((v.at(&[0, 1]) - s1).abs() < 1e-15);
        assert_eq!(v.at(&[0, 2]), 0.5);
        assert_eq!(v.at(&[1, 2]), 0.5);
    }

    #[test]
    fn zero_query_similarity_is_half() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(vec![4, 2]));
        let kmap = leaf(&mut g, &[2, 2, 2], 3);
        let ku = g.unfold(kmap, 3).unwrap();
        let s = local_similarity(&mut g, q, ku).unwrap();
        assert_eq!(g.shape(s), &[4, 9]);
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn retention_with_unit_window_scales_columns() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[4, 4], 1);
        let s = leaf(&mut g, &[4, 1], 2);
        let out = local_retention(&mut g, a, s, 1, 2, 2).unwrap();
        let (av, sv, ov) = (g.value(a), g.value(s), g.value(out));
        for q in 0..4 {
            for j in 0..4 {
                assert_eq!(ov.at(&[q, j]), sv.at(&[j, 0]) * av.at(&[q, j]));
            }
        }
    }

    #[test]
    fn retention_rejects_bad_grid() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[4, 4], 1);
        let s = leaf(&mut g, &[4, 9], 2);
        assert!(matches!(local_retention(&mut g, a, s, 3, 3, 2), Err(Error::Dimension(_))));
        assert!(matches!(local_retention(&mut g, a, s, 2, 2, 2), Err(Error::Config(_))));
    }

    #[test]
    fn gamma_zero_aggregate_is_identity() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[4, 4], 1);
        let v = leaf(&mut g, &[4, 3], 2);
        let f = leaf(&mut g, &[3, 2, 2], 3);
        let gamma = g.param(Tensor::scalar(0.0));
        let out = aggregate(&mut g, a, v, f, gamma).unwrap();
        assert_eq!(g.value(out), g.value(f));
    }

    #[test]
    fn identity_attention_with_unit_gamma_adds_values() {
        let mut g = Graph::new();
        let mut eye = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        let a = g.constant(eye);
        let v = leaf(&mut g, &[4, 3], 2);
        let f = leaf(&mut g, &[3, 2, 2], 3);
        let gamma = g.param(Tensor::scalar(1.0));
        let out = aggregate(&mut g, a, v, f, gamma).unwrap();
        let (vv, fv, ov) = (g.value(v), g.value(f), g.value(out));
        for c in 0..3 {
            for p in 0..4 {
                assert_eq!(ov.at(&[c, p / 2, p % 2]), vv.at(&[p, c]) + fv.at(&[c, p / 2, p % 2]));
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = DenoisedNLConfig::new(16, 3);
        assert_eq!(cfg.reduced_channels, 2);
        cfg.validate().unwrap();
        cfg.window = 4;
        assert!(cfg.validate().is_err());
        cfg.window = 3;
        cfg.reduced_channels = 16;
        assert!(cfg.validate().is_err());
    }
}

use super::{BoundParams, NetConfig};
use crate::attention::{denoised_nl_forward, DenoisedNLOutput};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Graph, Var};

/// Handles produced by [`model_forward`].
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `B×C_n×H/8×W/8`.
    pub logits: Var,
    /// `B×C_n×H/4×W/4`, from the res2 tap.
    pub aux2: Var,
    /// `B×C_n×H/8×W/8`, from the res3 tap.
    pub aux3: Var,
    /// `B×C_n×H/16×W/16`; present when global rectifying is on.
    pub coarse: Option<Var>,
    /// One attention record per batch entry.
    pub attention: Vec<DenoisedNLOutput>,
}

fn conv(g: &mut Graph, p: &BoundParams, x: Var, name: &str, stride: usize, dilation: usize) -> Result<Var> {
    let w = p.var(name)?;
    let &[out, inp, k, _] = g.shape(w) else {
        return Err(Error::dim(format!("{name} is not a conv weight")));
    };
    let spec = ConvSpec::same(inp, out, k).with_dilation(dilation).with_stride(stride);
    g.conv2d(x, w, &spec)
}

fn norm(g: &mut Graph, p: &BoundParams, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.weight"))?;
    let beta = p.var(&format!("{prefix}.bias"))?;
    if let Some((mean, var)) = p.running_stats(prefix)? {
        return g.norm_fixed(x, gamma, beta, mean, var, eps);
    }
    let y = g.batch_norm(x, gamma, beta, eps)?;
    p.record_norm(prefix, y);
    Ok(y)
}

fn linear_head(g: &mut Graph, p: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
    let y = conv(g, p, x, &format!("{prefix}.weight"), 1, 1)?;
    g.channel_bias(y, p.var(&format!("{prefix}.bias"))?)
}

fn batch_hw(g: &Graph, x: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *g.shape(x) {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::dim(format!("{what}: expected B×C×H×W, got {s:?}"))),
    }
}

/// Conv stem to stride 8: returns `(X, res2, res3)`.
pub fn stem_forward(g: &mut Graph, p: &BoundParams, img: Var, cfg: &NetConfig) -> Result<(Var, Var, Var)> {
    let (_, c, h, w) = batch_hw(g, img, "image")?;
    if c != cfg.image_channels {
        return Err(Error::dim(format!("image has {c} channels, config says {}", cfg.image_channels)));
    }
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(Error::config(format!("image size {h}×{w} must be a positive multiple of 16")));
    }
    let mut x = img;
    let mut taps = Vec::with_capacity(2);
    for i in 0..4 {
        let (stride, dilation) = if i < 3 { (2, 1) } else { (1, 2) };
        x = conv(g, p, x, &format!("stem.{i}.conv.weight"), stride, dilation)?;
        x = norm(g, p, x, &format!("stem.{i}.norm"), cfg.norm_eps)?;
        x = g.relu(x);
        if i == 1 || i == 2 {
            taps.push(x);
        }
    }
    Ok((x, taps[0], taps[1]))
}

/// 1×1 channel reduction followed by a stride-2 basic block.
pub fn reduction_forward(g: &mut Graph, p: &BoundParams, x: Var, cfg: &NetConfig) -> Result<Var> {
    let (_, _, h, w) = batch_hw(g, x, "reduction input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!("reduction input {h}×{w} must have even extents")));
    }
    let eps = cfg.norm_eps;
    let r = conv(g, p, x, "reduce.conv.weight", 1, 1)?;
    let r = norm(g, p, r, "reduce.norm", eps)?;
    let r = g.relu(r);

    let y = conv(g, p, r, "block.conv1.weight", 2, 1)?;
    let y = norm(g, p, y, "block.norm1", eps)?;
    let y = g.relu(y);
    let y = conv(g, p, y, "block.conv2.weight", 1, 1)?;
    let y = norm(g, p, y, "block.norm2", eps)?;
    let skip = conv(g, p, r, "block.skip.weight", 2, 1)?;
    let y = g.add(y, skip)?;
    Ok(g.relu(y))
}

/// Fuses `X`, the upsampled attention output and the global context into
/// class logits at stride 8.
pub fn head_forward(g: &mut Graph, p: &BoundParams, x: Var, f_prime: Var, cfg: &NetConfig) -> Result<Var> {
    let (_, _, h, w) = batch_hw(g, x, "head input")?;
    let (_, _, fh, fw) = batch_hw(g, f_prime, "augmented feature")?;
    if fh * 2 != h || fw * 2 != w {
        return Err(Error::dim(format!("F' {fh}×{fw} cannot be upsampled ×2 onto X {h}×{w}")));
    }
    let up = g.upsample_nearest(f_prime, 2, 2)?;
    let pooled = g.global_avg_pool(x)?;
    let ctx = linear_head(g, p, pooled, "context")?;
    let ctx = g.upsample_nearest(ctx, h, w)?;
    let fused = g.concat(&[x, up, ctx], 1)?;
    let y = conv(g, p, fused, "head.conv.weight", 1, 1)?;
    let y = norm(g, p, y, "head.norm", cfg.norm_eps)?;
    let y = g.relu(y);
    linear_head(g, p, y, "head.cls")
}

/// Full forward over a `B×C_img×H×W` batch.
pub fn model_forward(g: &mut Graph, p: &BoundParams, img: Var, cfg: &NetConfig) -> Result<ModelOutput> {
    cfg.validate()?;
    let (x, res2, res3) = stem_forward(g, p, img, cfg)?;
    let f = reduction_forward(g, p, x, cfg)?;
    let (batch, c, h, w) = batch_hw(g, f, "attention input")?;

    let attn_params = p.attention()?;
    let attn_cfg = cfg.attention();
    let mut outputs = Vec::with_capacity(batch);
    let mut records = Vec::with_capacity(batch);
    let mut coarse = Vec::with_capacity(batch);
    for b in 0..batch {
        let fb = g.select(f, b)?;
        let rec = denoised_nl_forward(g, fb, &attn_params, &attn_cfg)?;
        outputs.push(rec.output);
        if let Some(pc) = rec.p_coarse {
            coarse.push(g.reshape(pc, vec![cfg.num_classes, h, w])?);
        }
        records.push(rec);
    }
    let f_prime = g.stack(&outputs)?;
    debug_assert_eq!(g.shape(f_prime), &[batch, c, h, w]);
    let coarse = if coarse.is_empty() { None } else { Some(g.stack(&coarse)?) };

    let logits = head_forward(g, p, x, f_prime, cfg)?;
    let aux2 = linear_head(g, p, res2, "aux2")?;
    let aux3 = linear_head(g, p, res3, "aux3")?;
    Ok(ModelOutput { logits, aux2, aux3, coarse, attention: records })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_gr: f64,
}

impl From<&NetConfig> for LossWeights {
    fn from(cfg: &NetConfig) -> Self {
        Self { lambda1: cfg.lambda1, lambda2: cfg.lambda2, lambda_gr: cfg.lambda_gr }
    }
}

/// Handles for the joint loss and its terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub principal: Var,
    pub aux2: Var,
    pub aux3: Var,
    pub coarse: Option<Var>,
}

impl LossTerms {
    /// `(total, lp, l1, l2, lgr)` as plain numbers; `lgr` is 0 when absent.
    pub fn values(&self, g: &Graph) -> (f64, f64, f64, f64, f64) {
        let s = |v: Var| g.value(v).data()[0];
        (s(self.total), s(self.principal), s(self.aux2), s(self.aux3), self.coarse.map_or(0.0, s))
    }
}

fn upsampled_ce(g: &mut Graph, logits: Var, labels: &[u8], label_hw: (usize, usize)) -> Result<Var> {
    let (_, _, h, w) = batch_hw(g, logits, "logits")?;
    let (lh, lw) = label_hw;
    if h == 0 || w == 0 || lh % h != 0 || lw % w != 0 {
        return Err(Error::dim(format!("logits {h}×{w} do not divide labels {lh}×{lw}")));
    }
    let up = if lh == h && lw == w { logits } else { g.upsample_nearest(logits, lh / h, lw / w)? };
    g.cross_entropy(up, labels)
}

/// `L = L_p + λ1·L_1 + λ2·L_2 + λ_gr·L_gr`, each a mean pixelwise
/// cross-entropy at label resolution after nearest upsampling.
pub fn joint_loss(
    g: &mut Graph,
    out: &ModelOutput,
    labels: &[u8],
    label_hw: (usize, usize),
    weights: LossWeights,
) -> Result<LossTerms> {
    let principal = upsampled_ce(g, out.logits, labels, label_hw)?;
    let aux2 = upsampled_ce(g, out.aux2, labels, label_hw)?;
    let aux3 = upsampled_ce(g, out.aux3, labels, label_hw)?;
    let coarse = out.coarse.map(|c| upsampled_ce(g, c, labels, label_hw)).transpose()?;

    let mut total = principal;
    for (term, weight) in [(Some(aux2), weights.lambda1), (Some(aux3), weights.lambda2), (coarse, weights.lambda_gr)] {
        if let Some(term) = term {
            let scaled = g.scale(term, weight);
            total = g.add(total, scaled)?;
        }
    }
    Ok(LossTerms { total, principal, aux2, aux3, coarse })
}

use super::kernels::{self, ConvSpec};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate adjoint faults, used as negative controls for gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    /// Scales the weight gradient of every conv2d by 1.1.
    Conv2dWeight,
    /// Scales the input gradient of every sigmoid by 1.1.
    Sigmoid,
}

const CORRUPTION_FACTOR: f64 = 1.1;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Conv2d { x: Var, w: Var, spec: ConvSpec, geom: ConvGeom, cols: Vec<f64> },
    ChannelBias(Var, Var),
    Unfold { x: Var, k: usize },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    NormFixed { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Upsample { x: Var, fh: usize, fw: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Select { x: Var, index: usize },
    Stack(Vec<Var>),
    Sum(Var),
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<u8>, counted: usize },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// A tape of primitive ops with hand-written adjoints.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    corruption: Option<Corruption>,
}

fn batch_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(format!("{what}: expected C×H×W or B×C×H×W, got {shape:?}"))),
    }
}

fn with_batch(rank3: bool, b: usize, rest: [usize; 3]) -> Vec<usize> {
    if rank3 {
        rest.to_vec()
    } else {
        vec![b, rest[0], rest[1], rest[2]]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_corruption(corruption: Corruption) -> Self {
        Self { corruption: Some(corruption), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when nothing reached `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape mirrors value"),
            None => Tensor::zeros(shape),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = kernels::expect_matrix(self.shape(a), "matmul lhs")?;
        let (k2, n) = kernels::expect_matrix(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched matmul: `[B×M×K] · [B×K×N] → [B×M×N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[ba, m, k], &[bb, k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::dim("bmm expects rank-3 operands"));
        };
        if ba != bb || k != k2 {
            return Err(Error::dim(format!(
                "bmm shapes {:?} and {:?} disagree",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..ba {
                kernels::gemm_nn(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![ba, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a · s` for a one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim(format!("scale_by needs a scalar, got {:?}", self.shape(s))));
        }
        let sv = self.data(s)[0];
        let value = self.value(a).map(|x| x * sv);
        let rg = self.any_grad(&[a, s]);
        Ok(self.push(value, Op::ScaleBy(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Zero-padded (dilated) cross-correlation, no bias. `x` is `C×H×W` or
    /// `B×C×H×W`; `w` is `C_out×C_in×k_h×k_w`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        let rank3 = self.value(x).rank() == 3;
        let (batch, c, h, wd) = batch_dims(self.shape(x), "conv2d input")?;
        let (kh, kw) = spec.kernel;
        let expected = [spec.out_channels, spec.in_channels, kh, kw];
        if self.shape(w) != expected {
            return Err(Error::dim(format!(
                "conv2d weight {:?} does not match spec {expected:?}",
                self.shape(w)
            )));
        }
        if c != spec.in_channels {
            return Err(Error::dim(format!("conv2d input has {c} channels, spec says {}", spec.in_channels)));
        }
        let (oh, ow) = spec.output_hw(h, wd)?;
        let rows = c * kh * kw;
        let area = oh * ow;
        let mut cols = vec![0.0; batch * rows * area];
        let mut out = vec![0.0; batch * spec.out_channels * area];
        {
            let (xd, wdat) = (self.data(x), self.data(w));
            for b in 0..batch {
                let col = &mut cols[b * rows * area..(b + 1) * rows * area];
                kernels::im2col(&xd[b * c * h * wd..(b + 1) * c * h * wd], h, wd, spec, oh, ow, col);
                kernels::gemm_nn(
                    spec.out_channels,
                    rows,
                    area,
                    wdat,
                    col,
                    &mut out[b * spec.out_channels * area..(b + 1) * spec.out_channels * area],
                );
            }
        }
        let value = Tensor::new(with_batch(rank3, batch, [spec.out_channels, oh, ow]), out)?;
        let rg = self.any_grad(&[x, w]);
        let geom = ConvGeom { batch, h, w: wd, oh, ow };
        Ok(self.push(value, Op::Conv2d { x, w, spec: *spec, geom, cols }, rg))
    }

    /// Adds `bias[c]` to every spatial position of channel `c`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (batch, c, h, w) = batch_dims(self.shape(x), "channel_bias")?;
        if self.value(bias).numel() != c {
            return Err(Error::dim(format!("bias of {} for {c} channels", self.value(bias).numel())));
        }
        let bd = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bd[(i / (h * w)) % c];
        }
        let _ = batch;
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::ChannelBias(x, bias), rg))
    }

    /// `C×H×W → N×C×k²` window extraction with zero padding.
    pub fn unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = self.value(x).unfold(k)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Unfold { x, k }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let rank3 = self.value(x).rank() == 3;
        let (batch, c, h, w) = batch_dims(self.shape(x), "global_avg_pool")?;
        let area = h * w;
        let data = self.data(x).chunks(area).map(|p| p.iter().sum::<f64>() / area as f64).collect();
        let value = Tensor::new(with_batch(rank3, batch, [c, 1, 1]), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Per-channel normalization with statistics over batch and space.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (batch, c, h, w) = batch_dims(self.shape(x), "batch_norm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim(format!("batch_norm affine params must have {c} entries")));
        }
        let area = h * w;
        let count = (batch * area) as f64;
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        for ch in 0..c {
            let plane = |b: usize| (b * c + ch) * area..(b * c + ch + 1) * area;
            let mean = (0..batch).map(|b| xd[plane(b)].iter().sum::<f64>()).sum::<f64>() / count;
            let var = (0..batch)
                .map(|b| xd[plane(b)].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / count;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            means[ch] = mean;
            vars[ch] = var;
            for b in 0..batch {
                for i in plane(b) {
                    xhat[i] = (xd[i] - mean) * is;
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, mean: means, var: vars }, rg))
    }

    /// Per-channel `(mean, biased variance)` computed by a [`Graph::batch_norm`]
    /// node; `None` for any other node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Per-channel normalization with supplied statistics:
    /// `γ·(x − mean)/√(var + eps) + β`.
    pub fn norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (batch, c, h, w) = batch_dims(self.shape(x), "norm_fixed")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c || mean.len() != c || var.len() != c {
            return Err(Error::dim(format!("norm_fixed parameters must have {c} entries")));
        }
        let area = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                for i in (b * c + ch) * area..(b * c + ch + 1) * area {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::NormFixed { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample_nearest(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        if fh == 0 || fw == 0 {
            return Err(Error::config("upsample factors must be positive"));
        }
        let rank3 = self.value(x).rank() == 3;
        let (batch, c, h, w) = batch_dims(self.shape(x), "upsample")?;
        let (oh, ow) = (h * fh, w * fw);
        let xd = self.data(x);
        let mut out = vec![0.0; batch * c * oh * ow];
        for (p, plane) in out.chunks_mut(oh * ow).enumerate() {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    plane[y * ow + xx] = src[(y / fh) * w + xx / fw];
                }
            }
        }
        let value = Tensor::new(with_batch(rank3, batch, [c, oh, ow]), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Upsample { x, fh, fw }, rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
                return Err(Error::dim(format!("concat shapes {base:?} and {s:?} disagree off axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let d = self.data(p);
                let chunk = d.len() / outer;
                out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Drops the leading axis by picking entry `index`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&lead, rest)) = shape.split_first() else {
            return Err(Error::dim("select on a scalar"));
        };
        if index >= lead {
            return Err(Error::dim(format!("select index {index} out of {lead}")));
        }
        let chunk: usize = rest.iter().product();
        let data = self.data(x)[index * chunk..(index + 1) * chunk].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(rest.to_vec(), data)?, Op::Select { x, index }, rg))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("stack of nothing"))?;
        let base = self.shape(*first).to_vec();
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p) != base.as_slice() {
                return Err(Error::dim("stack operands differ in shape"));
            }
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(base);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Stack(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean pixelwise cross-entropy over non-ignored labels.
    ///
    /// `logits` is `C×H×W` or `B×C×H×W`; `labels` holds `B·H·W` entries in
    /// `[0, C)` or [`IGNORE_LABEL`]. With no scored pixels the loss is 0 and
    /// so is its gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (batch, c, h, w) = batch_dims(self.shape(logits), "cross_entropy")?;
        let area = h * w;
        if labels.len() != batch * area {
            return Err(Error::dim(format!("{} labels for {} pixels", labels.len(), batch * area)));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= c) {
            return Err(Error::Data(format!("label {bad} outside [0, {c})")));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        let mut counted = 0;
        let mut col = vec![0.0; c];
        for b in 0..batch {
            for p in 0..area {
                for ch in 0..c {
                    col[ch] = ld[(b * c + ch) * area + p];
                }
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
                for ch in 0..c {
                    probs[(b * c + ch) * area + p] = (col[ch] - max).exp() / z;
                }
                let label = labels[b * area + p];
                if label != IGNORE_LABEL {
                    total += z.ln() + max - col[label as usize];
                    counted += 1;
                }
            }
        }
        let loss = if counted == 0 { 0.0 } else { total / counted as f64 };
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, probs, labels: labels.to_vec(), counted },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a one-element root. Gradients from earlier calls
    /// are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot, &self.nodes);
    }

    fn corrupt(&self, kind: Corruption) -> f64 {
        if self.corruption == Some(kind) {
            CORRUPTION_FACTOR
        } else {
            1.0
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // The op is moved out so parents can be updated without aliasing it.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                self.accumulate(*a, |da, nodes| kernels::gemm_nt(m, n, k, g, nodes[b.0].value.data(), da));
                self.accumulate(*b, |db, nodes| kernels::gemm_tn(k, m, n, nodes[a.0].value.data(), g, db));
            }
            Op::BatchMatMul(a, b) => {
                let [bs, m, k] = self.shape(*a).try_into().unwrap();
                let n = self.shape(*b)[2];
                self.accumulate(*a, |da, nodes| {
                    let bd = nodes[b.0].value.data();
                    for t in 0..bs {
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            &bd[t * k * n..(t + 1) * k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                        );
                    }
                });
                self.accumulate(*b, |db, nodes| {
                    let ad = nodes[a.0].value.data();
                    for t in 0..bs {
                        kernels::gemm_tn(
                            k,
                            m,
                            n,
                            &ad[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut db[t * k * n..(t + 1) * k * n],
                        );
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let gt = kernels::transpose(g, n, m);
                self.accumulate(*a, |da, _| add_into(da, &gt));
            }
            Op::Reshape(a) => self.accumulate(*a, |da, _| add_into(da, g)),
            Op::Add(a, b) => {
                self.accumulate(*a, |da, _| add_into(da, g));
                self.accumulate(*b, |db, _| add_into(db, g));
            }
            Op::Mul(a, b) => {
                self.accumulate(*a, |da, nodes| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(nodes[b.0].value.data()) {
                        *d += gv * bv;
                    }
                });
                self.accumulate(*b, |db, nodes| {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::ScaleBy(a, s) => {
                self.accumulate(*a, |da, nodes| {
                    let sv = nodes[s.0].value.data()[0];
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv * sv;
                    }
                });
                self.accumulate(*s, |ds, nodes| {
                    ds[0] += g.iter().zip(nodes[a.0].value.data()).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::Scale(a, c) => self.accumulate(*a, |da, _| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }),
            Op::Sigmoid(a) => {
                let factor = self.corrupt(Corruption::Sigmoid);
                let out = self.nodes[i].value.data().to_vec();
                self.accumulate(*a, |da, _| {
                    for ((d, gv), s) in da.iter_mut().zip(g).zip(&out) {
                        *d += factor * gv * s * (1.0 - s);
                    }
                });
            }
            Op::Relu(a) => self.accumulate(*a, |da, nodes| {
                for ((d, gv), x) in da.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                    if *x > 0.0 {
                        *d += gv;
                    }
                }
            }),
            Op::SoftmaxRows(a) => {
                let n = self.shape(*a)[1];
                let out = self.nodes[i].value.data().to_vec();
                self.accumulate(*a, |da, _| {
                    for ((drow, grow), srow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = grow.iter().zip(srow).map(|(x, y)| x * y).sum();
                        for ((d, gv), s) in drow.iter_mut().zip(grow).zip(srow) {
                            *d += s * (gv - dot);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, spec, geom, cols } => {
                let ConvGeom { batch, h, w: wd, oh, ow } = *geom;
                let rows = spec.in_channels * spec.kernel.0 * spec.kernel.1;
                let area = oh * ow;
                let oc = spec.out_channels;
                let factor = self.corrupt(Corruption::Conv2dWeight);
                self.accumulate(*w, |dw, _| {
                    let mut acc = vec![0.0; dw.len()];
                    for b in 0..batch {
                        kernels::gemm_nt(
                            oc,
                            area,
                            rows,
                            &g[b * oc * area..(b + 1) * oc * area],
                            &cols[b * rows * area..(b + 1) * rows * area],
                            &mut acc,
                        );
                    }
                    for (d, a) in dw.iter_mut().zip(acc) {
                        *d += factor * a;
                    }
                });
                self.accumulate(*x, |dx, nodes| {
                    let wdat = nodes[w.0].value.data();
                    let plane = spec.in_channels * h * wd;
                    let mut dcols = vec![0.0; rows * area];
                    for b in 0..batch {
                        dcols.fill(0.0);
                        kernels::gemm_tn(rows, oc, area, wdat, &g[b * oc * area..(b + 1) * oc * area], &mut dcols);
                        kernels::col2im(&dcols, h, wd, spec, oh, ow, &mut dx[b * plane..(b + 1) * plane]);
                    }
                });
            }
            Op::ChannelBias(x, bias) => {
                let (_, c, h, w) = batch_dims(self.shape(*x), "").unwrap();
                self.accumulate(*x, |dx, _| add_into(dx, g));
                self.accumulate(*bias, |db, _| {
                    for (p, plane) in g.chunks(h * w).enumerate() {
                        db[p % c] += plane.iter().sum::<f64>();
                    }
                });
            }
            Op::Unfold { x, k } => {
                let [c, h, w] = self.shape(*x).try_into().unwrap();
                self.accumulate(*x, |dx, _| kernels::unfold_backward(g, c, h, w, *k, dx));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = batch_dims(self.shape(*x), "").unwrap();
                let area = h * w;
                self.accumulate(*x, |dx, _| {
                    for (plane, gv) in dx.chunks_mut(area).zip(g) {
                        for d in plane {
                            *d += gv / area as f64;
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, .. } => {
                let (batch, c, h, w) = batch_dims(self.shape(*x), "").unwrap();
                let area = h * w;
                let count = (batch * area) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let r = (b * c + ch) * area..(b * c + ch + 1) * area;
                        sum_g[ch] += g[r.clone()].iter().sum::<f64>();
                        sum_gx[ch] += g[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                self.accumulate(*gamma, |dg, _| add_into(dg, &sum_gx));
                self.accumulate(*beta, |db, _| add_into(db, &sum_g));
                self.accumulate(*x, |dx, nodes| {
                    let gd = nodes[gamma.0].value.data();
                    for b in 0..batch {
                        for ch in 0..c {
                            let scale = gd[ch] * inv_std[ch] / count;
                            for idx in (b * c + ch) * area..(b * c + ch + 1) * area {
                                dx[idx] += scale * (count * g[idx] - sum_g[ch] - xhat[idx] * sum_gx[ch]);
                            }
                        }
                    }
                });
            }
            Op::NormFixed { x, gamma, beta, xhat, inv_std } => {
                let (batch, c, h, w) = batch_dims(self.shape(*x), "").unwrap();
                let area = h * w;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let r = (b * c + ch) * area..(b * c + ch + 1) * area;
                        sum_g[ch] += g[r.clone()].iter().sum::<f64>();
                        sum_gx[ch] += g[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                self.accumulate(*gamma, |dg, _| add_into(dg, &sum_gx));
                self.accumulate(*beta, |db, _| add_into(db, &sum_g));
                self.accumulate(*x, |dx, nodes| {
                    let gd = nodes[gamma.0].value.data();
                    for b in 0..batch {
                        for ch in 0..c {
                            let scale = gd[ch] * inv_std[ch];
                            for idx in (b * c + ch) * area..(b * c + ch + 1) * area {
                                dx[idx] += scale * g[idx];
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, fh, fw } => {
                let (_, _, h, w) = batch_dims(self.shape(*x), "").unwrap();
                let (oh, ow) = (h * fh, w * fw);
                self.accumulate(*x, |dx, _| {
                    for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dplane[(y / fh) * w + xx / fw] += gplane[y * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let outer: usize = self.shape(parts[0])[..*axis].iter().product();
                let mut offset = 0;
                let out_chunk = g.len() / outer;
                for &p in parts {
                    let chunk = self.nodes[p.0].value.numel() / outer;
                    self.accumulate(p, |dp, _| {
                        for o in 0..outer {
                            let src = &g[o * out_chunk + offset..o * out_chunk + offset + chunk];
                            add_into(&mut dp[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Select { x, index } => {
                let chunk = g.len();
                self.accumulate(*x, |dx, _| add_into(&mut dx[index * chunk..(index + 1) * chunk], g));
            }
            Op::Stack(parts) => {
                let chunk = g.len() / parts.len();
                for (t, &p) in parts.iter().enumerate() {
                    self.accumulate(p, |dp, _| add_into(dp, &g[t * chunk..(t + 1) * chunk]));
                }
            }
            Op::Sum(a) => self.accumulate(*a, |da, _| {
                for d in da {
                    *d += g[0];
                }
            }),
            Op::CrossEntropy { logits, probs, labels, counted } => {
                if *counted > 0 {
                    let (batch, c, h, w) = batch_dims(self.shape(*logits), "").unwrap();
                    let area = h * w;
                    let scale = g[0] / *counted as f64;
                    self.accumulate(*logits, |dl, _| {
                        for b in 0..batch {
                            for p in 0..area {
                                let label = labels[b * area + p];
                                if label == IGNORE_LABEL {
                                    continue;
                                }
                                for ch in 0..c {
                                    let idx = (b * c + ch) * area + p;
                                    let target = if ch == label as usize { 1.0 } else { 0.0 };
                                    dl[idx] += scale * (probs[idx] - target);
                                }
                            }
                        }
                    });
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gives_twice_input() {
        let mut g = Graph::new();
        let data = [1.0, -2.0, 3.0, 0.5];
        let a = g.param(t(&[4], &data));
        let sq = g.mul(a, a).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|x| 2.0 * x).collect();
        assert_eq!(g.grad(a).unwrap(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let a = g.param(Tensor::ones(vec![2]));
        assert!(matches!(g.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::ones(vec![2]));
        let c = g.constant(Tensor::full(vec![2], 3.0));
        let m = g.mul(a, c).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0, 3.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut g = Graph::new();
        let logits = g.param(t(&[2, 1, 2], &[1.0, 2.0, 3.0, -1.0]));
        let loss = g.cross_entropy(logits, &[IGNORE_LABEL, IGNORE_LABEL]).unwrap();
        assert_eq!(g.value(loss).data(), &[0.0]);
        g.backward(loss).unwrap();
        assert!(g.grad(logits).map_or(true, |d| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(vec![2, 1, 1]));
        assert!(matches!(g.cross_entropy(logits, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(vec![2, 3]));
        let b = g.param(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        let c = g.param(Tensor::zeros(vec![3, 2]));
        assert!(matches!(g.add(a, c), Err(Error::Dimension(_))));
        assert!(matches!(g.mul(a, c), Err(Error::Dimension(_))));
    }
}

//! Slice-level forward/adjoint kernels shared by [`super::Tensor`] and the tape.
//!
//! Every kernel writes each output element from exactly one thread in a fixed
//! summation order, so results are bitwise reproducible regardless of the
//! rayon pool size.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, dilation 1, "same" padding for odd `k`.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: 1,
            dilation: 1,
            padding: (k - 1) / 2,
            in_channels,
            out_channels,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Sets the dilation and resets padding to keep the output size ("same").
    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel.0 - 1) / 2;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::config("conv stride and dilation must be positive"));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::config("conv kernel extents must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("conv channel counts must be positive"));
        }
        Ok(())
    }

    /// Output extent along one axis; errors when it would be < 1.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(Error::dim(format!(
                "conv output would be empty: input {input}, pad {}, effective kernel {span}",
                self.padding
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.output_extent(h, self.kernel.0)?, self.output_extent(w, self.kernel.1)?))
    }
}

pub fn expect_matrix(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::dim(format!("{what}: expected a matrix, got shape {shape:?}"))),
    }
}

pub fn expect_chw(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::dim(format!("{what}: expected C×H×W, got shape {shape:?}"))),
    }
}

pub fn check_window(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::config(format!("window size must be odd and positive, got {k}")));
    }
    Ok(())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn for_rows(out: &mut [f64], row_len: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    if row_len == 0 {
        return;
    }
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_rows(out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// `out[m×n] += a[m×k] · bᵀ` where `b` is stored `n×k`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for_rows(out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    });
}

/// `out[m×n] += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for_rows(out, n, m * k * n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// Row-wise softmax with max subtraction, in place over `n`-wide rows.
pub fn softmax_rows_inplace(data: &mut [f64], n: usize) {
    for_rows(data, n, data.len() * 4, |_, row| {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = 1.0 / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    });
}

/// Gathers `k×k` zero-padded windows: `out[p][c][u]` for position `p = y·w + x`.
pub fn unfold_forward(x: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let r = (k / 2) as isize;
    let kk = k * k;
    for_rows(out, c * kk, h * w * c * kk, |p, slot| {
        let (py, px) = ((p / w) as isize, (p % w) as isize);
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for u in 0..kk {
                let y = py + (u / k) as isize - r;
                let xx = px + (u % k) as isize - r;
                slot[ch * kk + u] = if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                    plane[y as usize * w + xx as usize]
                } else {
                    0.0
                };
            }
        }
    });
}

/// Adjoint of [`unfold_forward`]: scatters window gradients back onto the image.
pub fn unfold_backward(dout: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let r = (k / 2) as isize;
    let kk = k * k;
    // Gather form keeps each dx element single-writer: position q receives
    // from the window of p = q - offset(u) at slot u.
    for_rows(dx, h * w, h * w * c * kk, |ch, plane| {
        for (q, g) in plane.iter_mut().enumerate() {
            let (qy, qx) = ((q / w) as isize, (q % w) as isize);
            let mut acc = 0.0;
            for u in 0..kk {
                let py = qy - (u / k) as isize + r;
                let px = qx - (u % k) as isize + r;
                if py >= 0 && py < h as isize && px >= 0 && px < w as isize {
                    let p = py as usize * w + px as usize;
                    acc += dout[(p * c + ch) * kk + u];
                }
            }
            *g += acc;
        }
    });
}

/// Lowers one `C×H×W` image to a `(C·kh·kw) × (oh·ow)` column matrix.
pub fn im2col(x: &[f64], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, cols: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let (s, d, pad) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let area = oh * ow;
    for_rows(cols, area, cols.len(), |row, out| {
        let ch = row / (kh * kw);
        let ki = (row / kw) % kh;
        let kj = row % kw;
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let y = oy as isize * s - pad + ki as isize * d;
            let dst = &mut out[oy * ow..(oy + 1) * ow];
            if y < 0 || y >= h as isize {
                dst.fill(0.0);
                continue;
            }
            let src = &plane[y as usize * w..(y as usize + 1) * w];
            for (ox, v) in dst.iter_mut().enumerate() {
                let xx = ox as isize * s - pad + kj as isize * d;
                *v = if xx >= 0 && xx < w as isize { src[xx as usize] } else { 0.0 };
            }
        }
    });
}

/// Adjoint of [`im2col`]: accumulates column gradients into `dx`.
pub fn col2im(dcols: &[f64], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, dx: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let (s, d, pad) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let area = oh * ow;
    // One channel plane per task; within a plane, taps accumulate in fixed order.
    for_rows(dx, h * w, dcols.len(), |ch, plane| {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &dcols[row * area..(row + 1) * area];
                for oy in 0..oh {
                    let y = oy as isize * s - pad + ki as isize * d;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * w..(y as usize + 1) * w];
                    for ox in 0..ow {
                        let xx = ox as isize * s - pad + kj as isize * d;
                        if xx >= 0 && xx < w as isize {
                            dst[xx as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let spec = ConvSpec::same(1, 1, 3).with_stride(2);
        assert_eq!(spec.output_extent(8, 3).unwrap(), 4);
        assert_eq!(spec.output_extent(7, 3).unwrap(), 4);
        let dilated = ConvSpec::same(1, 1, 3).with_dilation(2);
        assert_eq!(dilated.padding, 2);
        assert_eq!(dilated.output_extent(5, 3).unwrap(), 5);
        let no_pad = ConvSpec::same(1, 1, 3).with_dilation(3).with_padding(0);
        assert!(no_pad.output_extent(6, 3).is_err());
    }

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut nn = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut nn);
        let mut nt = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(&b, k, n), &mut nt);
        let mut tn = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(&a, m, k), &b, &mut tn);
        for i in 0..m * n {
            assert!((nn[i] - nt[i]).abs() < 1e-14);
            assert!((nn[i] - tn[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn sigmoid_is_stable_for_large_magnitudes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(-3.0) + sigmoid(3.0) - 1.0).abs() < 1e-15);
    }
}

use super::{Rng, SegSample};
use crate::tensor::{Tensor, IGNORE_LABEL};

/// Random augmentation recipe applied as scale → flip → crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentOps {
    /// Flip horizontally with probability ½.
    pub hflip: bool,
    /// Uniform scale factor range, e.g. `(0.5, 2.0)`.
    pub scale: Option<(f64, f64)>,
    /// Random crop of this `(h, w)`, padding with zeros / ignore when short.
    pub crop: Option<(usize, usize)>,
}

impl AugmentOps {
    pub fn none() -> Self {
        Self { hflip: false, scale: None, crop: None }
    }
}

pub fn hflip(s: &SegSample) -> SegSample {
    let (c, h, w) = (s.image.shape()[0], s.height(), s.width());
    let src = s.image.data();
    let mut image = vec![0.0; src.len()];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mx = w - 1 - x;
            labels[y * w + x] = s.labels[y * w + mx];
            for ch in 0..c {
                image[(ch * h + y) * w + x] = src[(ch * h + y) * w + mx];
            }
        }
    }
    SegSample { id: s.id.clone(), image: Tensor::new(vec![c, h, w], image).expect("shape"), labels }
}

/// Resamples to `round(H·f)×round(W·f)`: bilinear for the image, nearest
/// for labels, both with half-pixel centres.
pub fn rescale(s: &SegSample, factor: f64) -> SegSample {
    let (c, h, w) = (s.image.shape()[0], s.height(), s.width());
    let nh = ((h as f64 * factor).round() as usize).max(1);
    let nw = ((w as f64 * factor).round() as usize).max(1);
    if nh == h && nw == w {
        return s.clone();
    }
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let src = s.image.data();
    let mut image = vec![0.0; c * nh * nw];
    let mut labels = vec![0u8; nh * nw];
    for y in 0..nh {
        let fy = (y as f64 + 0.5) * sy;
        let ny = (fy as usize).min(h - 1);
        let gy = (fy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (gy.floor() as usize, gy - gy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..nw {
            let fx = (x as f64 + 0.5) * sx;
            let nx = (fx as usize).min(w - 1);
            labels[y * nw + x] = s.labels[ny * w + nx];
            let gx = (fx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (gx.floor() as usize, gx - gx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bottom = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                image[(ch * nh + y) * nw + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    SegSample { id: s.id.clone(), image: Tensor::new(vec![c, nh, nw], image).expect("shape"), labels }
}

/// Window `[top, top+ch) × [left, left+cw)`; positions outside the source
/// become zero pixels with [`IGNORE_LABEL`]. Offsets may be negative.
pub fn crop(s: &SegSample, top: isize, left: isize, ch: usize, cw: usize) -> SegSample {
    let (c, h, w) = (s.image.shape()[0], s.height(), s.width());
    let src = s.image.data();
    let mut image = vec![0.0; c * ch * cw];
    let mut labels = vec![IGNORE_LABEL; ch * cw];
    for y in 0..ch {
        let sy = top + y as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..cw {
            let sx = left + x as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            labels[y * cw + x] = s.labels[sy * w + sx];
            for k in 0..c {
                image[(k * ch + y) * cw + x] = src[(k * h + sy) * w + sx];
            }
        }
    }
    SegSample { id: s.id.clone(), image: Tensor::new(vec![c, ch, cw], image).expect("shape"), labels }
}

pub fn augment(s: &SegSample, ops: &AugmentOps, rng: &mut Rng) -> SegSample {
    let mut out = match ops.scale {
        Some((lo, hi)) => rescale(s, rng.uniform(lo, hi)),
        None => s.clone(),
    };
    if ops.hflip && rng.bernoulli(0.5) {
        out = hflip(&out);
    }
    if let Some((ch, cw)) = ops.crop {
        let (h, w) = (out.height(), out.width());
        // Oversized crops centre the image with a random jitter inside the pad.
        let top = if h >= ch { rng.range_inclusive(0, h - ch) as isize } else { -(rng.range_inclusive(0, ch - h) as isize) };
        let left = if w >= cw { rng.range_inclusive(0, w - cw) as isize } else { -(rng.range_inclusive(0, cw - w) as isize) };
        out = crop(&out, top, left, ch, cw);
    }
    out
}

//! Synthetic shape segmentation data.
//!
//! Every sample is drawn from its own RNG stream, derived from the spec seed
//! and the sample index, so generation is order-independent and parallel.

mod augment;
mod io;
pub mod pnm;
mod rng;

pub use augment::{augment, crop, hflip, rescale, AugmentOps};
pub use io::{load_dataset, load_dataset_expecting, save_dataset, write_dataset_to, DATASET_MAGIC, DATASET_VERSION};
pub use rng::{streams, Rng};

use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, IGNORE_LABEL};

/// Geometric primitive a class is rendered as.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Background,
    Rectangle,
    Disk,
    Ring,
    Stripe,
}

const FOREGROUND_KINDS: [ShapeKind; 4] = [ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Ring, ShapeKind::Stripe];

impl ShapeKind {
    /// Class 0 is background; classes `1..` cycle through the four shapes.
    pub fn for_class(class: usize) -> Self {
        if class == 0 {
            ShapeKind::Background
        } else {
            FOREGROUND_KINDS[(class - 1) % FOREGROUND_KINDS.len()]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Objects drawn per foreground class, inclusive range.
    pub count_min: usize,
    pub count_max: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Per-class fill textures; required for more than five classes.
    pub texture: bool,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self { height: 64, width: 64, num_classes: 4, count_min: 0, count_max: 2, noise: 0.1, texture: true, seed: 0 }
    }
}

pub(crate) const SPEC_KEYS: &[&str] =
    &["height", "width", "num_classes", "count_min", "count_max", "noise", "texture", "seed"];

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("canvas must be non-empty"));
        }
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::config("num_classes must be in 2..=254"));
        }
        if self.num_classes > 5 && !self.texture {
            return Err(Error::config(format!(
                "{} classes exceed the 5 shape kinds; enable texture to tell repeats apart",
                self.num_classes
            )));
        }
        if self.count_min > self.count_max {
            return Err(Error::config("count_min exceeds count_max"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be non-negative"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(SPEC_KEYS)?;
        let d = Self::default();
        let spec = Self {
            height: kv.get_or("height", d.height)?,
            width: kv.get_or("width", d.width)?,
            num_classes: kv.get_or("num_classes", d.num_classes)?,
            count_min: kv.get_or("count_min", d.count_min)?,
            count_max: kv.get_or("count_max", d.count_max)?,
            noise: kv.get_or("noise", d.noise)?,
            texture: kv.get_or("texture", d.texture)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("num_classes", self.num_classes);
        kv.set("count_min", self.count_min);
        kv.set("count_max", self.count_max);
        kv.set("noise", self.noise);
        kv.set("texture", self.texture);
        kv.set("seed", self.seed);
        kv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    /// `H·W` row-major labels in `[0, C_n)` or [`IGNORE_LABEL`].
    pub labels: Vec<u8>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width() + x]
    }

    /// Pixel count per class; ignored pixels are not counted.
    pub fn class_areas(&self, num_classes: usize) -> Vec<usize> {
        let mut areas = vec![0; num_classes];
        for &l in &self.labels {
            if l != IGNORE_LABEL {
                areas[l as usize] += 1;
            }
        }
        areas
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: ShapesSpec,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    /// Number of samples each class appears in.
    pub fn census(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.num_classes];
        for s in &self.samples {
            for (c, &area) in s.class_areas(self.spec.num_classes).iter().enumerate() {
                if area > 0 {
                    counts[c] += 1;
                }
            }
        }
        counts
    }

    pub fn find(&self, id: &str) -> Option<&SegSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

#[derive(Clone, Copy, Debug)]
enum Geometry {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
    Ring { cx: f64, cy: f64, r_out: f64, r_in: f64 },
    Stripe { px: f64, py: f64, nx: f64, ny: f64, half: f64 },
}

impl Geometry {
    fn sample(kind: ShapeKind, h: usize, w: usize, rng: &mut Rng) -> Self {
        let s = h.min(w) as f64;
        let cx = rng.uniform(0.0, w as f64);
        let cy = rng.uniform(0.0, h as f64);
        match kind {
            ShapeKind::Rectangle => Geometry::Rect {
                cx,
                cy,
                hw: rng.uniform(0.10, 0.25) * s,
                hh: rng.uniform(0.10, 0.25) * s,
            },
            ShapeKind::Disk => Geometry::Disk { cx, cy, r: rng.uniform(0.10, 0.22) * s },
            ShapeKind::Ring => {
                let r_out = rng.uniform(0.16, 0.28) * s;
                Geometry::Ring { cx, cy, r_out, r_in: 0.55 * r_out }
            }
            ShapeKind::Stripe | ShapeKind::Background => {
                let theta = rng.uniform(0.0, std::f64::consts::PI);
                Geometry::Stripe { px: cx, py: cy, nx: theta.cos(), ny: theta.sin(), half: rng.uniform(0.04, 0.08) * s }
            }
        }
    }

    /// Membership test at pixel centre `(x + ½, y + ½)`.
    fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Geometry::Rect { cx, cy, hw, hh } => (px - cx).abs() <= hw && (py - cy).abs() <= hh,
            Geometry::Disk { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Geometry::Ring { cx, cy, r_out, r_in } => {
                let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
            Geometry::Stripe { px: ox, py: oy, nx, ny, half } => ((px - ox) * nx + (py - oy) * ny).abs() <= half,
        }
    }
}

/// Base RGB colour of a class. Foreground colours are deliberately close to
/// each other so that shape and texture matter, not just hue.
fn class_color(class: usize) -> [f64; 3] {
    if class == 0 {
        return [0.35, 0.35, 0.35];
    }
    let t = (class - 1) as f64;
    [0.55 + 0.08 * (t * 1.7).sin(), 0.50 + 0.08 * (t * 2.3).cos(), 0.45 + 0.06 * t.sin()]
}

/// Texture offset of a class at a pixel: oriented sinusoid with a
/// class-specific period and angle.
fn class_texture(class: usize, x: usize, y: usize) -> f64 {
    let period = 3.0 + (class % 5) as f64 * 1.5;
    let angle = class as f64 * 0.9;
    let phase = (x as f64 * angle.cos() + y as f64 * angle.sin()) * std::f64::consts::TAU / period;
    0.12 * phase.sin()
}

/// Renders one sample from an explicit RNG stream.
pub fn render_sample(spec: &ShapesSpec, id: String, rng: &mut Rng) -> SegSample {
    let (h, w) = (spec.height, spec.width);
    let mut objects: Vec<(usize, Geometry)> = Vec::new();
    for class in 1..spec.num_classes {
        let count = rng.range_inclusive(spec.count_min, spec.count_max);
        for _ in 0..count {
            objects.push((class, Geometry::sample(ShapeKind::for_class(class), h, w, rng)));
        }
    }
    // Draw order is back to front; later objects occlude earlier ones.
    rng.shuffle(&mut objects);

    let mut labels = vec![0u8; h * w];
    for (class, geom) in &objects {
        for y in 0..h {
            for x in 0..w {
                if geom.contains(x, y) {
                    labels[y * w + x] = *class as u8;
                }
            }
        }
    }
    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let class = labels[y * w + x] as usize;
            let base = class_color(class);
            let tex = if spec.texture { class_texture(class, x, y) } else { 0.0 };
            for ch in 0..3 {
                let noise = if spec.noise > 0.0 { spec.noise * rng.normal() } else { 0.0 };
                image[(ch * h + y) * w + x] = (base[ch] + tex + noise).clamp(0.0, 1.0);
            }
        }
    }
    SegSample { id, image: Tensor::new(vec![3, h, w], image).expect("image shape"), labels }
}

/// Generates `n` samples deterministically from `spec.seed`.
pub fn generate(spec: &ShapesSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Usage("generate needs at least one sample".into()));
    }
    let base = Rng::stream(spec.seed, streams::DATASET).next_u64();
    let samples = (0..n)
        .into_par_iter()
        .map(|i| render_sample(spec, format!("s{i:05}"), &mut Rng::stream(base, i as u64)))
        .collect();
    Ok(Dataset { spec: spec.clone(), samples })
}

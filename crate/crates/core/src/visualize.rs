//! Attention-map dumps for a single query pixel.
//!
//! The three maps are the query's rows of `A`, `A'` and `A''` reshaped to
//! the stride-16 grid, written as `map1`, `map2`, `map3` (`.pgm` preview
//! plus `.dnlt` tensor).

use std::path::Path;

use crate::data::pnm::{normalize_to_u8, write_pgm};
use crate::error::{Error, Result};
use crate::network::{model_forward, ModelParams, NetConfig};
use crate::tensor::{write_tensor, Graph, Tensor};

/// Ratio between input pixels and attention-grid cells.
pub const GRID_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    /// Query cell `(row, col)` on the grid.
    pub query: (usize, usize),
    /// Rows of `A`, `A'`, `A''`, each `h×w` on the grid.
    pub maps: [Tensor; 3],
}

impl AttentionMaps {
    pub fn grid(&self) -> (usize, usize) {
        let s = self.maps[0].shape();
        (s[0], s[1])
    }
}

/// Maps an input-coordinate pixel `(x, y)` to its grid cell `(row, col)`.
pub fn query_cell(pixel: (usize, usize), image_hw: (usize, usize)) -> Result<(usize, usize)> {
    let ((x, y), (h, w)) = (pixel, image_hw);
    if x >= w || y >= h {
        return Err(Error::Usage(format!("pixel ({x},{y}) outside {w}×{h} image")));
    }
    Ok((y / GRID_STRIDE, x / GRID_STRIDE))
}

/// Runs the model on one `C×H×W` image and extracts the three maps for the
/// query pixel `(x, y)` given in input coordinates.
pub fn attention_maps(
    params: &ModelParams,
    norm_stats: Option<&ModelParams>,
    cfg: &NetConfig,
    image: &Tensor,
    pixel: (usize, usize),
) -> Result<AttentionMaps> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::dim(format!("expected C×H×W image, got {:?}", image.shape())));
    };
    let (qy, qx) = query_cell(pixel, (h, w))?;
    let mut g = Graph::new();
    let mut bound = params.bind(&mut g, false);
    if let Some(stats) = norm_stats {
        bound = bound.with_norm_stats(stats);
    }
    let img = g.constant(image.reshape(vec![1, c, h, w])?);
    let out = model_forward(&mut g, &bound, img, cfg)?;
    let rec = &out.attention[0];
    let (gh, gw) = (rec.height, rec.width);
    if qy >= gh || qx >= gw {
        return Err(Error::Usage(format!("grid cell ({qy},{qx}) outside {gh}×{gw} grid")));
    }
    let q = qy * gw + qx;
    let row = |v| Tensor::new(vec![gh, gw], g.value(v).row(q).to_vec());
    Ok(AttentionMaps { query: (qy, qx), maps: [row(rec.a)?, row(rec.a_prime)?, row(rec.a_dprime)?] })
}

/// Writes `map{1,2,3}.pgm` (min-max scaled) and `map{1,2,3}.dnlt`.
pub fn write_maps(maps: &AttentionMaps, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (h, w) = maps.grid();
    for (i, m) in maps.maps.iter().enumerate() {
        write_pgm(dir.join(format!("map{}.pgm", i + 1)), w, h, &normalize_to_u8(m.data()))?;
        write_tensor(dir.join(format!("map{}.dnlt", i + 1)), m)?;
    }
    Ok(())
}

/// Ground-truth label of each grid cell, read at the cell centre.
pub fn grid_labels(labels: &[u8], image_hw: (usize, usize), grid_hw: (usize, usize)) -> Vec<u8> {
    let ((h, w), (gh, gw)) = (image_hw, grid_hw);
    let (sy, sx) = (h / gh, w / gw);
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let (y, x) = ((gy * sy + sy / 2).min(h - 1), (gx * sx + sx / 2).min(w - 1));
            out.push(labels[y * w + x]);
        }
    }
    out
}

/// Fraction of a map's total mass on cells labelled `class`.
pub fn region_mass(map: &[f64], cell_labels: &[u8], class: u8) -> f64 {
    let total: f64 = map.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = map.iter().zip(cell_labels).filter(|(_, &l)| l == class).map(|(v, _)| v).sum();
    inside / total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_cell_floor_divides() {
        assert_eq!(query_cell((17, 40), (64, 64)).unwrap(), (2, 1));
        assert!(matches!(query_cell((64, 0), (64, 64)), Err(Error::Usage(_))));
    }

    #[test]
    fn region_mass_fraction() {
        let labels = [0, 1, 1, 0];
        assert!((region_mass(&[0.1, 0.2, 0.3, 0.4], &labels, 1) - 0.5).abs() < 1e-15);
        assert_eq!(region_mass(&[0.0; 4], &labels, 1), 0.0);
    }

    #[test]
    fn grid_labels_sample_cell_centres() {
        let mut labels = vec![0u8; 32 * 32];
        labels[8 * 32 + 24] = 3;
        assert_eq!(grid_labels(&labels, (32, 32), (2, 2)), vec![0, 3, 0, 0]);
    }
}

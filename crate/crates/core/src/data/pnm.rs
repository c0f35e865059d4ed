//! Binary PGM (P5) and PPM (P6) writers for eyeballing samples and maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, IGNORE_LABEL};

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::dim(format!("{} pixels for a {width}×{height} PGM", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)?)?;
    Ok(())
}

pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::dim(format!("{} bytes for a {width}×{height} PPM", rgb.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    fs::write(path, out)?;
    Ok(())
}

/// Min-max normalises `values` to `0..=255`; a constant map becomes all zeros.
pub fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Interleaves a `3×H×W` image in `[0, 1]` into RGB bytes.
pub fn image_to_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::dim(format!("expected 3×H×W image, got {:?}", image.shape())));
    };
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Fixed palette for label maps; ignored pixels are white.
pub fn labels_to_rgb(labels: &[u8]) -> Vec<u8> {
    const PALETTE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ];
    labels
        .iter()
        .flat_map(|&l| if l == IGNORE_LABEL { [255, 255, 255] } else { PALETTE[l as usize % PALETTE.len()] })
        .collect()
}

//! Dataset files:
//!
//! ```text
//! "DNLD" · u32 version · u32 len · spec text (UTF-8, key = value) · u64 count
//! count × ( u32 len · id · u32 H · u32 W · u32 C · C·H·W × f64 · H·W × u8 )
//! ```
//!
//! Integers and floats are little-endian. Loading reads the whole file before
//! decoding, so a failed load never yields a partial dataset.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, SegSample, ShapesSpec};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DNLD";
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset_to(out: &mut impl Write, ds: &Dataset) -> Result<()> {
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    let spec = ds.spec.to_kv().to_text();
    out.write_all(&(spec.len() as u32).to_le_bytes())?;
    out.write_all(spec.as_bytes())?;
    out.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    for s in &ds.samples {
        out.write_all(&(s.id.len() as u32).to_le_bytes())?;
        out.write_all(s.id.as_bytes())?;
        let [c, h, w] = [s.image.shape()[0], s.height(), s.width()];
        for v in [h, w, c] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in s.image.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&s.labels)?;
    }
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset_to(&mut buf, ds)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corrupt(format!("truncated while reading {what}")));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
    }
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic").map_err(|_| Error::Format("file too short for magic".into()))?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let spec = ShapesSpec::from_kv(&KeyValues::parse(&cur.string("spec echo")?)?)
        .map_err(|e| Error::Corrupt(format!("spec echo: {e}")))?;
    let count = cur.u64("sample count")?;
    let mut samples = Vec::new();
    for _ in 0..count {
        let id = cur.string("sample id")?;
        let (h, w, c) = (cur.u32("height")? as usize, cur.u32("width")? as usize, cur.u32("channels")? as usize);
        let numel = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Corrupt("image size overflow".into()))?;
        let raw = cur.take(numel * 8, "image")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let labels = cur.take(h * w, "labels")?.to_vec();
        if let Some(bad) = labels.iter().find(|&&l| l != crate::tensor::IGNORE_LABEL && l as usize >= spec.num_classes) {
            return Err(Error::Corrupt(format!("sample {id}: label {bad} out of range")));
        }
        samples.push(SegSample { id, image: Tensor::new(vec![c, h, w], data)?, labels });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(Dataset { spec, samples })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(&fs::read(path)?)
}

/// Loads and checks that the file was generated for `num_classes` classes.
pub fn load_dataset_expecting(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    if ds.spec.num_classes != num_classes {
        return Err(Error::ConfigMismatch(format!(
            "dataset has {} classes, expected {num_classes}",
            ds.spec.num_classes
        )));
    }
    Ok(ds)
}

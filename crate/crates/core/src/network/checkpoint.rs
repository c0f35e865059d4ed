//! Checkpoint files:
//!
//! ```text
//! "DNLC" · u32 version · u32 len · config text (UTF-8) · u64 iteration
//! u32 count · count × (u32 len · name · tensor)          parameters
//! u32 count · count × (u32 len · name · tensor)          optimizer velocity
//! u32 count · count × (u32 len · name · tensor)          normalization statistics
//! ```
//!
//! Integers are little-endian; tensors use the `DNLT` encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_from, write_tensor_to, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DNLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Echo of the resolved run config (`key = value` text).
    pub config_text: String,
    /// Optimizer steps completed.
    pub iteration: u64,
    pub params: ModelParams,
    /// Momentum buffers; empty when not saved.
    pub velocity: Option<ModelParams>,
    /// Running normalization statistics; empty when not saved.
    pub norm_stats: Option<ModelParams>,
}

fn write_named(out: &mut impl Write, params: Option<&ModelParams>) -> Result<()> {
    let count = params.map_or(0, ModelParams::len) as u32;
    out.write_all(&count.to_le_bytes())?;
    for (name, t) in params.into_iter().flat_map(ModelParams::iter) {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        write_tensor_to(out, t)?;
    }
    Ok(())
}

fn read_u32(input: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    crate::tensor::read_exact_pub(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(input: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u32(input, what)? as usize;
    if len > 1 << 24 {
        return Err(Error::Corrupt(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    crate::tensor::read_exact_pub(input, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
}

fn read_named(input: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let count = read_u32(input, "tensor count")?;
    (0..count)
        .map(|_| {
            let name = read_string(input, "tensor name")?;
            Ok((name, read_tensor_from(input)?))
        })
        .collect()
}

impl Checkpoint {
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.config_text.len() as u32).to_le_bytes())?;
        out.write_all(self.config_text.as_bytes())?;
        out.write_all(&self.iteration.to_le_bytes())?;
        write_named(out, Some(&self.params))?;
        write_named(out, self.velocity.as_ref())?;
        write_named(out, self.norm_stats.as_ref())?;
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        crate::tensor::read_exact_pub(input, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(input, "checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_text = read_string(input, "config echo")?;
        let mut it = [0u8; 8];
        crate::tensor::read_exact_pub(input, &mut it, "iteration")?;
        let params = ModelParams::from_entries(read_named(input)?);
        let velocity = read_named(input)?;
        let velocity = (!velocity.is_empty()).then(|| ModelParams::from_entries(velocity));
        let norm_stats = read_named(input)?;
        let norm_stats = (!norm_stats.is_empty()).then(|| ModelParams::from_entries(norm_stats));
        Ok(Self { config_text, iteration: u64::from_le_bytes(it), params, velocity, norm_stats })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;
    use crate::network::NetConfig;

    #[test]
    fn round_trip_and_corruption() {
        let cfg = NetConfig { stem_widths: [2, 2, 2, 2], channels: 4, reduced_channels: 1, head_channels: 2, ..NetConfig::default() };
        let params = ModelParams::init(&cfg, &mut Rng::new(5)).unwrap();
        let ck = Checkpoint {
            config_text: "seed = 5\n".into(), iteration: 12, velocity: Some(params.zeros_like()),
            norm_stats: Some(ModelParams::init_norm_stats(&cfg)),
            params,
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), ck);

        let mut bad = buf.clone();
        bad[3] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() / 2];
        assert!(matches!(Checkpoint::read_from(&mut &short[..]), Err(Error::Corrupt(_))));
    }
}

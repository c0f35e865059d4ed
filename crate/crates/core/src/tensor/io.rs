//! Little-endian tensor serialization:
//! `"DNLT"` · u32 version · u8 rank · rank × u64 extents · f64 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DNLT";
pub const TENSOR_VERSION: u32 = 1;

pub fn write_tensor_to(out: &mut impl Write, t: &Tensor) -> Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::dim("tensor rank exceeds 255"))?;
    out.write_all(&[rank])?;
    for &e in t.shape() {
        out.write_all(&(e as u64).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_exact(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_tensor_from(input: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic, "tensor magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    read_exact(input, &mut word, "tensor version")?;
    let version = u32::from_le_bytes(word);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let mut rank = [0u8; 1];
    read_exact(input, &mut rank, "tensor rank")?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    let mut long = [0u8; 8];
    for _ in 0..rank[0] {
        read_exact(input, &mut long, "tensor extent")?;
        shape.push(usize::try_from(u64::from_le_bytes(long)).map_err(|_| Error::Corrupt("extent overflow".into()))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Corrupt("tensor size overflow".into()))?;
    let mut bytes = vec![0u8; numel.checked_mul(8).ok_or_else(|| Error::Corrupt("tensor size overflow".into()))?];
    read_exact(input, &mut bytes, "tensor payload")?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut out, t)?;
    out.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor_from(&mut BufReader::new(File::open(path)?))
}

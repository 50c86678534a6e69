//! Binary tensor records.
//!
//! Layout: `"FTEN"`, version byte (1), dtype byte (0 = f32, 1 = f64), rank
//! byte, five zero bytes, `rank` little-endian u64 extents, then the
//! row-major little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FTEN";
pub const VERSION: u8 = 1;
const HEADER: usize = 12;

/// A decoded record before conversion to a fixed element type.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub dtype: u8,
    pub extents: Vec<u64>,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn numel(&self) -> usize {
        self.extents.iter().product::<u64>() as usize
    }

    pub fn values<T: Real>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::CorruptCheckpoint(format!("record holds dtype {}, expected {}", self.dtype, T::NAME)));
        }
        Ok(self.payload.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    /// Left-pads the extents with ones up to rank 4.
    pub fn into_tensor<T: Real>(self) -> Result<Tensor<T>> {
        if self.extents.len() > 4 || self.extents.is_empty() {
            return Err(Error::shape(format!("cannot hold a rank-{} record in a 4-d tensor", self.extents.len())));
        }
        let mut dims = [1usize; 4];
        let off = 4 - self.extents.len();
        for (d, &e) in dims[off..].iter_mut().zip(&self.extents) {
            *d = e as usize;
        }
        let data = self.values::<T>()?;
        Tensor::new(Shape::new(dims[0], dims[1], dims[2], dims[3])?, data)
    }
}

pub fn encode_raw<T: Real>(extents: &[u64], data: &[T], out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE);
    out.push(extents.len() as u8);
    out.extend_from_slice(&[0; 5]);
    for e in extents {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.reserve(data.len() * T::BYTES);
    for &v in data {
        v.write_le(out);
    }
}

pub fn encode<T: Real>(tensor: &Tensor<T>, out: &mut Vec<u8>) {
    let extents = tensor.shape().0.map(|e| e as u64);
    encode_raw(&extents, tensor.data(), out);
}

/// Decodes one record from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Record, usize)> {
    let bad = |why: &str| Error::CorruptCheckpoint(format!("tensor record: {why}"));
    if bytes.len() < HEADER {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let dtype = bytes[5];
    let width = match dtype {
        0 => 4,
        1 => 8,
        d => return Err(bad(&format!("unknown dtype {d}"))),
    };
    let rank = bytes[6] as usize;
    let mut pos = HEADER;
    if bytes.len() < pos + 8 * rank {
        return Err(bad("truncated extents"));
    }
    let extents: Vec<u64> = bytes[pos..pos + 8 * rank]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    pos += 8 * rank;
    let n = extents
        .iter()
        .try_fold(1u64, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(width as u64))
        .ok_or_else(|| bad("extents overflow"))? as usize;
    if bytes.len() - pos < n {
        return Err(bad("truncated payload"));
    }
    let payload = bytes[pos..pos + n].to_vec();
    Ok((Record { dtype, extents, payload }, pos + n))
}

pub fn to_bytes<T: Real>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode(tensor, &mut out);
    out
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (rec, used) = decode(bytes)?;
    if used != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes after tensor record", bytes.len() - used)));
    }
    rec.into_tensor()
}

pub fn write<T: Real>(w: &mut impl Write, tensor: &Tensor<T>) -> Result<()> {
    w.write_all(&to_bytes(tensor))?;
    Ok(())
}

pub fn save<T: Real>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    fs::write(path, to_bytes(tensor))?;
    Ok(())
}

/// Reads a record of either dtype and converts it to `T`.
pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (rec, _) = decode(&bytes).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    match rec.dtype {
        0 => Ok(rec.into_tensor::<f32>()?.cast()),
        _ => Ok(rec.into_tensor::<f64>()?.cast()),
    }
}

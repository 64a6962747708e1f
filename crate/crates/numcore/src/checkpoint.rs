//! Binary checkpoint format for parameter sets.
//!
//! Layout: magic `PSRNCKPT`, version u32, then one record per tensor in
//! name order: name length u32, name bytes, rank u32, one u32 extent per
//! dimension, then the values as little-endian 64-bit floats. All integers
//! are little-endian. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{NumError, Result};
use crate::params::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::TensorBuffer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PSRNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a parameter set. Freeze flags are training state, not model
/// state, and are not persisted.
pub fn checkpoint_bytes<T: Scalar>(params: &ParameterSet<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.total_len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.values() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(NumError::CheckpointFormat {
                offset: self.offset,
                details: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes back into a parameter set (all unfrozen).
pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParameterSet<T>> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NumError::CheckpointFormat {
            offset: 0,
            details: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NumError::CheckpointFormat {
            offset: 8,
            details: format!("unsupported version {version}"),
        });
    }
    let mut params = ParameterSet::new();
    while r.offset < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name_off = r.offset;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| NumError::CheckpointFormat {
                offset: name_off,
                details: "parameter name is not utf-8".to_string(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(T::from_f64_lossy(r.f64("value")?));
        }
        let value_off = r.offset;
        let tensor = TensorBuffer::from_values(&shape, values).map_err(|e| {
            NumError::CheckpointFormat {
                offset: value_off,
                details: format!("invalid tensor {name:?}: {e}"),
            }
        })?;
        params.insert(&name, tensor)?;
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ParameterSet<T>) -> Result<()> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParameterSet<T>> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}

//! Parameter checkpoint file.
//!
//! Layout: magic `MLTPN1`, u32 parameter count, then per parameter a u32
//! name length, the name bytes, u32 rank, u32 extents, and the values as
//! little-endian f64, row major. All integers little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::Parameter;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MLTPN1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic (expected \"MLTPN1\")")]
    BadMagic,
    #[error("truncated checkpoint at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint has no parameter named {name:?}")]
    UnknownParameter { name: String },
    #[error("parameter {name:?}: checkpoint shape {found:?} != model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

pub fn save_checkpoint(path: &Path, params: &[Parameter]) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = p.tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.tensor.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.offset + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: self.offset,
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Read every (name, shape, values) record from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        offset: 0,
    };
    if cur.take(6)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8_lossy(cur.take(name_len)?).into_owned();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        out.push((name, shape, values));
    }
    Ok(out)
}

/// Load a checkpoint into an existing parameter list, matching by name.
/// Every checkpoint record must land on a model parameter of equal shape.
pub fn restore_checkpoint(path: &Path, params: &[Parameter]) -> Result<(), CheckpointError> {
    let records = load_checkpoint(path)?;
    for (name, shape, values) in records {
        let param = params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| CheckpointError::UnknownParameter { name: name.clone() })?;
        if param.tensor.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: shape,
                expected: param.tensor.shape().to_vec(),
            });
        }
        param.tensor.data_mut().copy_from_slice(&values);
    }
    Ok(())
}

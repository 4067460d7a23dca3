//! Binary tensor container shared by attention, embedding and weight files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic ("ATTN", "EMBD" or "WGHT")
//!      4     4  version (u32, currently 1)
//!      8    16  four u32 dimensions
//!     24     8  reserved, zero
//!     32   8*n  f64 payload
//! ```
//!
//! For `ATTN` and `EMBD`, `n` is the product of the dimensions. `WGHT` files
//! hold `(layers, d_model, d_k, d_v)` followed by W_Q, W_K and W_V per layer,
//! so `n = layers * d_model * (2 * d_k + d_v)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 32;
pub const VERSION: u32 = 1;

pub const MAGIC_ATTENTION: [u8; 4] = *b"ATTN";
pub const MAGIC_EMBEDDING: [u8; 4] = *b"EMBD";
pub const MAGIC_WEIGHTS: [u8; 4] = *b"WGHT";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub dims: [u32; 4],
    pub data: Vec<f64>,
}

impl Container {
    pub fn new(magic: [u8; 4], dims: [u32; 4], data: Vec<f64>) -> Result<Self> {
        let expected = element_count(magic, &dims)
            .ok_or_else(|| Error::DimensionMismatch(format!("dimensions {dims:?} overflow")))?;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "dimensions {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Container { magic, dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.data.len());
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&[0u8; 8]);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], magic: [u8; 4], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(path, "shorter than the 32-byte header"));
        }
        if bytes[..4] != magic {
            return Err(Error::format(
                path,
                format!(
                    "magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&bytes[..4]),
                    String::from_utf8_lossy(&magic)
                ),
            ));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let dims = [word(8), word(12), word(16), word(20)];
        let n = element_count(magic, &dims).ok_or_else(|| Error::format(path, "dimensions overflow"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != n * 8 {
            return Err(Error::format(
                path,
                format!("payload is {} bytes, header implies {}", payload.len(), n * 8),
            ));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Container { magic, dims, data })
    }

    pub fn read(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, magic, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.dims[axis] as usize
    }
}

fn element_count(magic: [u8; 4], dims: &[u32; 4]) -> Option<usize> {
    let [a, b, c, d] = dims.map(|v| v as usize);
    if magic == MAGIC_WEIGHTS {
        let per_row = c.checked_mul(2)?.checked_add(d)?;
        a.checked_mul(b)?.checked_mul(per_row)
    } else {
        a.checked_mul(b)?.checked_mul(c)?.checked_mul(d)
    }
}

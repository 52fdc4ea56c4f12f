//! KFT1 portable tensor files.
//!
//! Layout (little-endian): magic `KFT1`, `u32` rank, `rank × u32` dims, then
//! `f32` values in row-major order.

use std::fs;
use std::path::Path;

use super::tensor::Tensor3;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KFT1";

#[derive(Debug, Clone, PartialEq)]
pub struct KftArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl KftArray {
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Self {
        KftArray {
            dims,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(path, detail);
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing KFT1 magic".into()));
        }
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| bad(format!("truncated header at byte {i}")))
        };
        let rank = word(4)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for r in 0..rank {
            dims.push(word(8 + 4 * r)? as usize);
        }
        let start = 8 + 4 * rank;
        let count: usize = dims.iter().product();
        let expected = start + 4 * count;
        if bytes.len() != expected {
            return Err(bad(format!(
                "payload holds {} bytes, dims {dims:?} need {}",
                bytes.len().saturating_sub(start),
                4 * count
            )));
        }
        let data = bytes[start..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(KftArray { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Interprets a rank-3 array as a tensor.
    pub fn into_tensor3(self, path: &Path) -> Result<Tensor3> {
        if self.rank() != 3 {
            return Err(Error::format(path, format!("expected rank 3, found rank {}", self.rank())));
        }
        Tensor3::new([self.dims[0], self.dims[1], self.dims[2]], self.to_f64())
    }
}

impl From<&Tensor3> for KftArray {
    fn from(t: &Tensor3) -> Self {
        KftArray::from_f64(t.dims().to_vec(), t.data())
    }
}

//! Checkpoint files: `u32` LE dimension count, one `u64` LE per dimension, then the
//! values as `f32` LE in row-major order. Also used for feature files.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error("value {0} not representable as f32")]
    Unrepresentable(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), values.len(), "checkpoint dims do not match value count");
        Checkpoint { dims, values }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::with_capacity(4 + 8 * self.dims.len() + 4 * self.values.len());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.values {
            let f = v as f32;
            if v.is_finite() && !f.is_finite() {
                return Err(CheckpointError::Unrepresentable(v));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut pos = 0;
        let mut take = |n: usize, what: &str| -> Result<&[u8], CheckpointError> {
            let slice = bytes.get(pos..pos + n).ok_or_else(|| CheckpointError::Truncated(format!("missing {what}")))?;
            pos += n;
            Ok(slice)
        };
        let ndims = u32::from_le_bytes(take(4, "dimension count")?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(ndims.min(16));
        for _ in 0..ndims {
            dims.push(u64::from_le_bytes(take(8, "dimension")?.try_into().unwrap()) as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Truncated("dimension product overflows".into()))?;
        let data =
            take(count.checked_mul(4).ok_or_else(|| CheckpointError::Truncated("size overflows".into()))?, "values")?;
        let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        if pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - pos));
        }
        Ok(Checkpoint { dims, values })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

//! Named-array binary container used for checkpoints and patch sidecars.
//!
//! Layout (little-endian): magic `MGCK`, `u32` version, `u32` array count,
//! then per array a `u16` name length, the UTF-8 name, a `u8` rank, `rank`
//! `u64` dimensions and the `f64` data in row-major order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArrayFileError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"MGCK\"")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("array name {0:?} longer than 65535 bytes")]
    NameTooLong(String),
    #[error("array {name:?}: {reason}")]
    Malformed { name: String, reason: String },
}

/// Ordered list of named arrays. Order is preserved on round trip.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayFile {
    pub arrays: Vec<(String, Tensor)>,
}

impl ArrayFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.arrays.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArrayFileError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| ArrayFileError::NameTooLong(name.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(bytes);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader(mut r: impl Read) -> Result<Self, ArrayFileError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ArrayFileError::Magic(magic));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ArrayFileError::Version(version));
        }
        let count = read_u32(&mut r)?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| ArrayFileError::Malformed {
                name: String::from_utf8_lossy(e.as_bytes()).into_owned(),
                reason: "name is not UTF-8".into(),
            })?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut d = [0u8; 8];
                r.read_exact(&mut d)?;
                shape.push(u64::from_le_bytes(d) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| ArrayFileError::Malformed {
                name: name.clone(),
                reason: e.to_string(),
            })?;
            arrays.push((name, t));
        }
        Ok(Self { arrays })
    }

    pub fn write(&self, path: &Path) -> Result<(), ArrayFileError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ArrayFileError> {
        let f = fs::File::open(path)?;
        Self::from_reader(io::BufReader::new(f))
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

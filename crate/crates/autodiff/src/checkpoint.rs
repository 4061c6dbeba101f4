//! Flat named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "OCFSLCKP"
//! version    u32
//! meta_len   u64, followed by meta_len bytes of UTF-8 metadata
//! count      u32
//! count x {  name_len u32, name bytes,
//!            ndim u32, ndim x u64 dims,
//!            prod(dims) x f64 values }
//! ```
//!
//! Values are always stored as 64-bit floats regardless of [`Real`].

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{AutodiffError, Real};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OCFSLCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata, typically a JSON document.
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32, AutodiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, AutodiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), AutodiffError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u64).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&(*v as f64).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, AutodiffError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = read_u64(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata = String::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;
        let count = read_u32(r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b) as Real);
            }
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AutodiffError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AutodiffError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

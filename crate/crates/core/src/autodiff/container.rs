//! Named-tensor container file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CLMRTNS\0"
//! version  u32      currently 1
//! meta_len u64, meta bytes (UTF-8, usually JSON)
//! count    u32
//! count × { name_len u32, name bytes, dtype u8 (0 = f32), ndim u32, dims u64 × ndim }
//! payload  every tensor's values in header order, f32 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 8] = b"CLMRTNS\0";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("container truncated")]
    Truncated,
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl NamedTensors {
    pub fn get(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let meta_len = r.u64()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| ContainerError::Corrupt("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| ContainerError::Corrupt("tensor name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(ContainerError::UnsupportedDtype(dtype));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            headers.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(headers.len());
        for (name, shape) in headers {
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(ContainerError::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(ContainerError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..64), meta in ".{0,40}") {
            let n = values.len();
            let c = NamedTensors {
                metadata: meta,
                tensors: vec![
                    ("a.weight".into(), Tensor::new(vec![n], values.clone()).unwrap()),
                    ("b".into(), Tensor::new(vec![1, n], values).unwrap()),
                ],
            };
            prop_assert_eq!(NamedTensors::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let c = NamedTensors {
            metadata: "{}".into(),
            tensors: vec![("w".into(), Tensor::from_vec(vec![1.0, 2.0]))],
        };
        let bytes = c.to_bytes();
        assert!(matches!(NamedTensors::from_bytes(&bytes[..bytes.len() - 1]), Err(ContainerError::Truncated)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(NamedTensors::from_bytes(&bad), Err(ContainerError::BadMagic)));
    }
}

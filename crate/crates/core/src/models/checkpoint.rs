//! Model checkpoint container.
//!
//! Layout (little-endian): `b"FWDB"`, version `u16`, spec text as `u32`
//! length + UTF-8 bytes, tensor count `u32`, then per tensor: rank `u32`,
//! each dim `u32`, raw `f32` scalars.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FWDB";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form architecture description, JSON by convention.
    pub spec: String,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.spec.len() as u32).to_le_bytes());
        out.extend_from_slice(self.spec.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.fail(0, "missing FWDB magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(4, format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let spec = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail(at, "spec is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes"));
        }
        Ok(Self { spec, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.origin.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.fail(self.pos, "truncated checkpoint"))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(spec in "[a-z0-9 ]{0,40}", dims in proptest::collection::vec(1usize..4, 0..3), seed in 0u64..1000) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32) * 0.5 - 3.0).collect();
            let ck = Checkpoint { spec, tensors: vec![Tensor::new(dims, data).unwrap(), Tensor::zeros(&[2, 3])] };
            let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint { spec: "x".into(), tensors: vec![] };
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"FWDB");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(b[10], b'x');
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOPE", Path::new("m")).is_err());
        let mut b = Checkpoint { spec: String::new(), tensors: vec![Tensor::zeros(&[2])] }.to_bytes();
        b.pop();
        assert!(matches!(Checkpoint::from_bytes(&b, Path::new("m")), Err(Error::Format { .. })));
    }
}

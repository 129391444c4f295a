//! The `SFWM` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SFWM" | version u32 | metadata_len u64 | metadata (UTF-8 JSON)
//! then, repeated until end of file:
//!   name_len u32 | name (UTF-8) | rank u32 | dims u64 * rank | payload f32 * prod(dims)
//! ```

use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::optim::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFWM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn from_store(metadata: Value, store: &ParamStore<f32>) -> Self {
        let mut ck = Self::new(metadata);
        ck.tensors = store
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        ck
    }

    pub fn to_store(&self) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.insert(name.clone(), t.clone());
        }
        store
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("json value serializes");
        let mut out = Vec::with_capacity(16 + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.err(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(4, &format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta_at = r.pos;
        let meta = r.take(meta_len)?;
        let metadata: Value = serde_json::from_slice(meta)
            .map_err(|e| r.err(meta_at, &format!("metadata is not JSON: {e}")))?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(r.err(at, &format!("implausible rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.err(at, "tensor size overflows"))?;
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| r.err(at, "tensor size overflows"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&dims, data)));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn content_hash(&self) -> String {
        hash_bytes(&self.to_bytes())
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: &str) -> Error {
        Error::Checkpoint {
            offset,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(json!({"stage": "ae", "lr": 1.5e-4, "stats": {"lo": -3.0, "hi": 2.5}}));
        ck.tensors.push(("enc.w0".into(), Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25])));
        ck.tensors.push(("enc.b0".into(), Tensor::new(&[3], vec![0.5, 0.25, 0.125])));
        ck
    }

    #[test]
    fn byte_exact_round_trip() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[0..4], b"SFWM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn truncation_is_positioned() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        match Checkpoint::from_bytes(cut) {
            Err(Error::Checkpoint { msg, offset }) => {
                assert_eq!(msg, "truncated");
                assert!(offset > 16);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint { offset: 0, .. })
        ));
    }
}

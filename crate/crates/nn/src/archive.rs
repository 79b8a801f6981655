//! Single-file named-tensor archive.
//!
//! Layout: the 8-byte magic `WMARCH01`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then every tensor's elements packed as
//! little-endian `f32` in header order. The header is
//! `{"meta": <any JSON>, "tensors": [{"name", "shape", "offset"}]}` where
//! `offset` counts elements from the start of the data block.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::NnError;

const MAGIC: &[u8; 8] = b"WMARCH01";

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn from_store(meta: serde_json::Value, store: &ParamStore) -> Self {
        Self { meta, tensors: store.named_tensors() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Loads every tensor into `store` by name.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<usize, NnError> {
        store.load_named(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.numel();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| NnError::Format("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| NnError::Format("truncated header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(NnError::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        let data = &r[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let end = start + n * 4;
            if end > data.len() {
                return Err(NnError::Format(format!("tensor `{}` runs past end of data", e.name)));
            }
            let vals = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, vals)));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_file() {
        let mut a = Archive::new(serde_json::json!({"arch": "x", "epoch": 3}));
        a.push("w", Tensor::new([2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]));
        a.push("b", Tensor::new([1], vec![0.25]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        a.save(&p).unwrap();
        assert_eq!(Archive::load(&p).unwrap(), a);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Archive::from_bytes(b"nope").is_err());
        assert!(Archive::from_bytes(b"WMARCH01\xff\xff\xff\xff\xff\xff\xff\x00").is_err());
    }
}

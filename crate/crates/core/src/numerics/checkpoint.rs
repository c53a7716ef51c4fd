//! Checkpoint container.
//!
//! Layout: the 7 magic bytes `PGCKPT1`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then every tensor as little-endian `f32` values in
//! header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"PGCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
    pub tensors: Vec<TensorSpec>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub vocab: Option<Vec<String>>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            vocab: self.vocab.clone(),
            tensors: self
                .params
                .entries()
                .iter()
                .map(|e| TensorSpec { name: e.name.clone(), shape: e.value.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 15 + 4 * self.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.params.entries() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| Error::Checkpoint("truncated header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        r = &r[len..];
        let mut params = ParamStore::new();
        for spec in &header.tensors {
            let n: usize = spec.shape.iter().product();
            if r.len() < 4 * n {
                return Err(Error::Checkpoint(format!("truncated tensor {}", spec.name)));
            }
            let data = r[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            r = &r[4 * n..];
            params.add(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { kind: header.kind, meta: header.meta, vocab: header.vocab, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

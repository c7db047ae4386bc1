//! Flat binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "REIDCKP1"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          tensor data, f64 little-endian, row-major
//! ```
//!
//! The header is `{"tensors": [{"name", "offset", "shape", "dtype"}], "meta": {..}}`
//! where `offset` counts bytes from the start of the data section and
//! `dtype` is always `"f64"`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::nn::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"REIDCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorIndex {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorIndex>,
    pub meta: serde_json::Value,
}

pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        let mut offset = 0u64;
        let mut index = Vec::with_capacity(store.len());
        let mut tensors = Vec::with_capacity(store.len());
        for e in store.entries() {
            index.push(TensorIndex {
                name: e.name.clone(),
                offset,
                shape: e.value.shape().to_vec(),
                dtype: "f64".into(),
            });
            offset += 8 * e.value.numel() as u64;
            tensors.push(e.value.clone());
        }
        Self {
            header: Header {
                tensors: index,
                meta,
            },
            tensors,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header =
            serde_json::to_vec(&self.header).map_err(|e| ReidError::Format(e.to_string()))?;
        let data_len: usize = self.tensors.iter().map(|t| 8 * t.numel()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| ReidError::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(e.to_string()))?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for ti in &header.tensors {
            if ti.dtype != "f64" {
                return Err(bad(format!("{}: unsupported dtype {}", ti.name, ti.dtype)));
            }
            let n = numel(&ti.shape);
            let start = ti.offset as usize;
            let end = start + 8 * n;
            if end > data.len() {
                return Err(bad(format!("{}: data out of range", ti.name)));
            }
            let vals = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(&ti.shape, vals)?);
        }
        Ok(Self { header, tensors })
    }

    /// Writes via a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.encode()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Copies every stored tensor into `store`; names and shapes must match
    /// the store exactly.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(ReidError::Format(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (ti, t) in self.header.tensors.iter().zip(&self.tensors) {
            let id = store
                .id(&ti.name)
                .ok_or_else(|| ReidError::Format(format!("unknown parameter {}", ti.name)))?;
            if store.value(id).shape() != t.shape() {
                return Err(crate::error::shape_err(
                    "checkpoint restore",
                    store.value(id).shape(),
                    t.shape(),
                ));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

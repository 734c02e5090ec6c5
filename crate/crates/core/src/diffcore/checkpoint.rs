//! Checkpoint files: one compact JSON header line describing every parameter
//! (`name`, `shape`, byte `offset` into the blob), then a contiguous blob of
//! little-endian `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DiffError, ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "mopdrive-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Vec<f32>>,
}

fn ckpt_err(msg: impl Into<String>) -> DiffError {
    DiffError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        let mut params = Vec::with_capacity(store.len());
        let mut values = Vec::with_capacity(store.len());
        let mut offset = 0;
        for (_, p) in store.iter() {
            params.push(ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset });
            offset += p.value.len() * 4;
            values.push(p.value.data().iter().map(|&v| v as f32).collect());
        }
        Self { header: CheckpointHeader { format: CHECKPOINT_FORMAT.into(), params, meta }, values }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DiffError> {
        let mut out = serde_json::to_vec(&self.header).map_err(|e| ckpt_err(e.to_string()))?;
        out.push(b'\n');
        for v in &self.values {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffError> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| ckpt_err("missing header line"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| ckpt_err(format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(ckpt_err(format!("unsupported format {:?}", header.format)));
        }
        let blob = &bytes[nl + 1..];
        let mut values = Vec::with_capacity(header.params.len());
        let mut expected_offset = 0;
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            if p.offset != expected_offset {
                return Err(ckpt_err(format!("parameter {} has offset {} (expected {})", p.name, p.offset, expected_offset)));
            }
            let end = p.offset + n * 4;
            if end > blob.len() {
                return Err(ckpt_err(format!("blob truncated at parameter {}", p.name)));
            }
            let v = blob[p.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            values.push(v);
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(ckpt_err(format!("{} trailing bytes after last parameter", blob.len() - expected_offset)));
        }
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffError> {
        fs::write(path, self.to_bytes()?).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, DiffError> {
        let bytes = fs::read(path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Overwrites every parameter of `store` with the stored values.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), DiffError> {
        if self.header.params.len() != store.len() {
            return Err(ckpt_err(format!(
                "checkpoint has {} parameters, network has {}",
                self.header.params.len(),
                store.len()
            )));
        }
        for (entry, values) in self.header.params.iter().zip(&self.values) {
            let id = store.find(&entry.name).ok_or_else(|| ckpt_err(format!("unknown parameter {}", entry.name)))?;
            if store.value(id).shape() != entry.shape.as_slice() {
                return Err(ckpt_err(format!(
                    "parameter {} has shape {:?}, network expects {:?}",
                    entry.name,
                    entry.shape,
                    store.value(id).shape()
                )));
            }
            let data: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
            *store.value_mut(id) = Tensor::new(entry.shape.clone(), data)?;
        }
        Ok(())
    }
}

//! Checkpoint file: magic, manifest length, JSON manifest, then a flat
//! little-endian `f32` payload.
//!
//! ```text
//! b"QASECKPT" | u32 LE version | u64 LE manifest bytes | manifest | payload
//! ```
//!
//! Every manifest tensor entry carries its name, shape, dtype (`"f32"`) and
//! byte offset into the payload. Head tensors use the `head.` prefix so the
//! generator can be loaded without them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{LoraConfig, PlmConfig};
use super::prompt::PromptTemplate;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::head::{HeadSpec, HEAD_PREFIX};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"QASECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub plm: PlmConfig,
    pub lora: Option<LoraConfig>,
    pub head: Option<HeadSpec>,
    pub template: PromptTemplate,
    pub max_answer_len: usize,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<Tensor>,
}

impl Checkpoint {
    /// Snapshots `store`. Values are rounded to `f32`.
    pub fn from_store(
        store: &ParamStore,
        plm: PlmConfig,
        lora: Option<LoraConfig>,
        head: Option<HeadSpec>,
        template: PromptTemplate,
        max_answer_len: usize,
        vocab: Vec<String>,
    ) -> Self {
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(store.len());
        let mut values = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                trainable: p.trainable,
            });
            offset += 4 * p.value.numel();
            let rounded: Vec<f64> = p.value.data().iter().map(|&x| x as f32 as f64).collect();
            values.push(Tensor::new(p.value.shape().to_vec(), rounded).expect("same shape"));
        }
        Checkpoint {
            manifest: Manifest {
                plm,
                lora,
                head,
                template,
                max_answer_len,
                vocab,
                tensors,
            },
            values,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for v in &self.values {
            for &x in v.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let payload = &body[mlen..];
        let mut values = Vec::with_capacity(manifest.tensors.len());
        let mut expected_offset = 0;
        for entry in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!("{}: offset {} out of order", entry.name, entry.offset)));
            }
            let numel: usize = entry.shape.iter().product();
            let end = entry.offset + 4 * numel;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("{}: payload truncated", entry.name)));
            }
            let data = payload[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            values.push(
                Tensor::new(entry.shape.clone(), data)
                    .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?,
            );
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(bad("trailing payload bytes"));
        }
        Ok(Checkpoint { manifest, values })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copy of this checkpoint with every head tensor removed.
    pub fn without_head(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut values = Vec::new();
        let mut offset = 0;
        for (e, v) in self.manifest.tensors.iter().zip(&self.values) {
            if e.name.starts_with(HEAD_PREFIX) {
                continue;
            }
            tensors.push(TensorEntry { offset, ..e.clone() });
            offset += 4 * v.numel();
            values.push(v.clone());
        }
        Checkpoint {
            manifest: Manifest {
                head: None,
                tensors,
                ..self.manifest.clone()
            },
            values,
        }
    }

    /// Copies every tensor of `store` whose name passes `filter` from this
    /// checkpoint, requiring matching shapes. Fails if any such tensor is
    /// missing or if the checkpoint holds unmatched tensors passing `filter`.
    pub fn restore_into(&self, store: &mut ParamStore, filter: impl Fn(&str) -> bool) -> Result<()> {
        let mut used = 0;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            if !filter(&name) {
                continue;
            }
            let pos = self
                .manifest
                .tensors
                .iter()
                .position(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let value = &self.values[pos];
            let param = store.get_mut(id);
            if value.shape() != param.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match configured {:?}",
                    value.shape(),
                    param.value.shape()
                )));
            }
            param.value = value.clone();
            param.trainable = self.manifest.tensors[pos].trainable;
            used += 1;
        }
        let available = self.manifest.tensors.iter().filter(|e| filter(&e.name)).count();
        if available != used {
            return Err(Error::Checkpoint(format!(
                "{} unexpected tensors for the configured model",
                available - used
            )));
        }
        Ok(())
    }
}

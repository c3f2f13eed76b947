//! `MOONCKP1` checkpoint files.
//!
//! Layout: 8 magic bytes, a little-endian `u64` header length, a JSON header
//! (format version, configs, epoch, RNG state, tensor names and shapes),
//! then every tensor's `f64` values little-endian in header order.

use std::fs;
use std::path::Path;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::train::TrainConfig;
use crate::error::{io_err, MoonError, Result};
use crate::model::{ModelConfig, MoonModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOONCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The training RNG is re-derived from `(seed, epoch)` at every epoch, so
/// these two values are its complete state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &MoonModel, train: Option<&TrainConfig>, epoch: usize) -> Self {
        Self {
            model: model.config().clone(),
            train: train.cloned(),
            epoch,
            rng: train.map(|t| RngState {
                seed: t.seed,
                next_epoch: epoch + 1,
            }),
            params: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds the network and installs the stored parameters.
    pub fn to_model(&self) -> Result<MoonModel> {
        let mut model = MoonModel::new(&self.model)?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(MoonError::Config(format!(
                "checkpoint holds {} tensors but the configured model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| MoonError::Config(format!("checkpoint tensor `{name}` is not a model parameter")))?;
            let slot = store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(MoonError::Config(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            rng: self.rng,
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let scalars: usize = self.params.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * scalars);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt_err = |offset: usize, reason: String| MoonError::Format {
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt_err(0, "bad magic, expected MOONCKP1".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize.checked_add(len).filter(|&e| e <= bytes.len());
        let Some(body) = body else {
            return Err(fmt_err(8, format!("header length {len} exceeds file size {}", bytes.len())));
        };
        let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| fmt_err(16, e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(fmt_err(16, format!("unsupported checkpoint version {}", header.version)));
        }
        let mut pos = body;
        let mut params = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(fmt_err(pos, format!("tensor `{}` is truncated", entry.name)));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((entry.name, Tensor::new(&entry.shape, data)));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(fmt_err(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            rng: header.rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

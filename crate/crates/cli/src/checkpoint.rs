//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `KRYF` |
//! | 4 | format version (`u32`) |
//! | 32 | SHA-256 of the payload |
//! | 8 | manifest length `m` (`u64`) |
//! | m | UTF-8 JSON manifest |
//! | rest | payload: tensors as contiguous `f64` little-endian |
//!
//! The manifest carries the model and training configuration, a tensor
//! table of `(name, shape, byte offset)` and free-form provenance.

use std::path::Path;

use krylov_core::trainer::TrainConfig;
use krylov_core::transformer::ModelConfig;
use krylov_core::ModelParams64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"KRYF";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 32 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub dtype: String,
}

/// Where a model came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_sha256: String,
    /// Chain length of the training data, if the family has one.
    pub train_sites: Option<usize>,
    /// The full run configuration, as JSON.
    pub run_config: serde_json::Value,
    pub parameter_checksum: String,
    pub final_val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tensors: Vec<TensorEntry>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams64,
    pub train: TrainConfig,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(8 * self.params.parameter_count());
        let mut tensors = Vec::new();
        for t in self.params.tensors() {
            tensors.push(TensorEntry {
                name: t.name,
                shape: t.shape,
                offset: payload.len(),
                dtype: "f64le".into(),
            });
            for x in t.data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            model: self.params.config.clone(),
            train: self.train.clone(),
            tensors,
            provenance: self.provenance.clone(),
        };
        let manifest = serde_json::to_vec(&manifest).expect("manifests serialize");

        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: &str| CliError::Format { path: path.to_path_buf(), line: 0, message: message.into() };
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (missing KRYF magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CliError::VersionMismatch {
                what: "checkpoint format".into(),
                found: version.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let checksum = &bytes[8..40];
        let manifest_len = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes")) as usize;
        let manifest_end = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[HEADER_LEN..manifest_end]).map_err(|e| bad(&format!("manifest: {e}")))?;
        let payload = &bytes[manifest_end..];
        if Sha256::digest(payload).as_slice() != checksum {
            return Err(CliError::ChecksumMismatch { path: path.to_path_buf() });
        }

        manifest
            .model
            .validate()
            .map_err(|e| bad(&format!("manifest model configuration: {e}")))?;
        let mut params = ModelParams64::zeros(&manifest.model);
        let mut expected = params.tensors_mut();
        if expected.len() != manifest.tensors.len() {
            return Err(bad("tensor table does not match the model configuration"));
        }
        for (slot, entry) in expected.iter_mut().zip(&manifest.tensors) {
            if slot.name != entry.name || slot.shape != entry.shape || entry.dtype != "f64le" {
                return Err(bad(&format!("unexpected tensor `{}`", entry.name)));
            }
            let end = entry.offset + 8 * slot.data.len();
            let raw = payload.get(entry.offset..end).ok_or_else(|| bad("truncated payload"))?;
            for (x, chunk) in slot.data.iter_mut().zip(raw.chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        drop(expected);
        Ok(Self {
            params,
            train: manifest.train,
            provenance: manifest.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(CliError::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and insists on a given architecture.
    pub fn load_expecting(path: &Path, model: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.params.config != model {
            return Err(CliError::VersionMismatch {
                what: "model configuration".into(),
                found: serde_json::to_string(&ckpt.params.config).expect("configs serialize"),
                expected: serde_json::to_string(model).expect("configs serialize"),
            });
        }
        Ok(ckpt)
    }
}

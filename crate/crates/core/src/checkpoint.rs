//! Checkpoints: `checkpoint.json` (manifest) plus `checkpoint.bin`
//! (every parameter as little-endian f64, in manifest order).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::data::NormStats;
use crate::model::{ModelDims, ModelError, ModelParams, Stgncde, Variant};

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "checkpoint.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub variant: Variant,
    pub epoch: usize,
    pub best_val_mae: Option<f64>,
    pub norm_stats: NormStats,
    pub tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to reproduce its predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Stgncde,
    pub epoch: usize,
    pub best_val_mae: f64,
    pub stats: NormStats,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: &Stgncde, epoch: usize, best_val_mae: f64, stats: NormStats) -> Self {
        Self {
            config,
            model: model.clone(),
            epoch,
            best_val_mae,
            stats,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CheckpointError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut tensors = Vec::new();
        let mut bytes = Vec::with_capacity(self.model.params.num_scalars() * 8);
        let mut offset = 0;
        for (name, t) in self.model.params.named() {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            dims: self.model.dims,
            variant: self.model.variant,
            epoch: self.epoch,
            best_val_mae: self.best_val_mae.is_finite().then_some(self.best_val_mae),
            norm_stats: self.stats.clone(),
            tensors,
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|source| CheckpointError::Manifest {
            path: manifest_path.clone(),
            source,
        })?;
        std::fs::write(&manifest_path, text).map_err(io(&manifest_path))?;
        let weights_path = dir.join(WEIGHTS_FILE);
        std::fs::write(&weights_path, bytes).map_err(io(&weights_path))
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).map_err(|source| CheckpointError::Io {
            path: manifest_path.clone(),
            source,
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest {
            path: manifest_path.clone(),
            source,
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(manifest.format_version));
        }
        let weights_path = dir.join(WEIGHTS_FILE);
        let bytes = std::fs::read(&weights_path).map_err(|source| CheckpointError::Io {
            path: weights_path.clone(),
            source,
        })?;
        if bytes.len() % 8 != 0 {
            return Err(CheckpointError::Corrupt(format!(
                "{WEIGHTS_FILE} has {} bytes, not a multiple of 8",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();

        // The layout comes from the architecture; entries are matched by name.
        let template = ModelParams::<Tensor>::init(
            &manifest.dims,
            manifest.variant,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        );
        let mut params = template.clone();
        let expected = template.named().len();
        if manifest.tensors.len() != expected {
            return Err(CheckpointError::Corrupt(format!(
                "manifest lists {} tensors, the architecture has {expected}",
                manifest.tensors.len()
            )));
        }
        for (name, slot) in params.named_mut() {
            let entry = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {name}")))?;
            if entry.shape != slot.shape() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: slot.shape().to_vec(),
                    found: entry.shape.clone(),
                }
                .into());
            }
            let data = values
                .get(entry.offset..entry.offset + entry.len)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name} runs past the end of the data")))?;
            slot.data_mut().copy_from_slice(data);
        }
        Ok(Self {
            config: manifest.config,
            model: Stgncde {
                dims: manifest.dims,
                variant: manifest.variant,
                params,
            },
            epoch: manifest.epoch,
            best_val_mae: manifest.best_val_mae.unwrap_or(f64::INFINITY),
            stats: manifest.norm_stats,
        })
    }
}

//! Flat JSON run configuration with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{ModelDims, Variant};
use crate::solver::{Method, SolverConfig};

/// Learning rates searched in the reference experiments.
pub const LR_GRID: [f64; 5] = [1e-2, 5e-3, 1e-3, 5e-4, 1e-4];
/// Weight-decay coefficients searched in the reference experiments.
pub const WEIGHT_DECAY_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown config key {key:?}; valid keys: {}", valid.join(", "))]
    UnknownKey { key: String, valid: Vec<&'static str> },
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// `λ·θ` added to the gradient before the moment estimates.
    #[default]
    L2,
    /// `θ ← θ − lr·λ·θ` applied separately from the moments.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossSpace {
    /// Predictions are denormalized and compared with raw targets.
    #[default]
    Original,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub values_csv: Option<PathBuf>,
    pub meta_json: Option<PathBuf>,
    pub variant: Variant,
    pub dim_h: usize,
    pub dim_z: usize,
    pub k_layers: usize,
    pub embed_dim: usize,
    pub output_dim: usize,
    pub time_channel: bool,
    pub solver: Method,
    pub steps_per_unit: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: DecayMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub missing_rate: f64,
    pub loss_space: LossSpace,
    pub grad_clip: Option<f64>,
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            values_csv: None,
            meta_json: None,
            variant: Variant::Full,
            dim_h: 64,
            dim_z: 64,
            k_layers: 2,
            embed_dim: 8,
            output_dim: 1,
            time_channel: true,
            solver: Method::Rk4,
            steps_per_unit: 1,
            lr: 1e-3,
            weight_decay: 1e-3,
            weight_decay_mode: DecayMode::L2,
            epochs: 200,
            batch_size: 64,
            patience: 15,
            seed: 0,
            missing_rate: 0.0,
            loss_space: LossSpace::Original,
            grad_clip: None,
            record_timing: true,
        }
    }
}

/// `(key, default, description)` for every accepted key.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("values_csv", "-", "series CSV, one row per 5-minute step, columns node{v}_f{f}"),
    ("meta_json", "-", "dataset metadata JSON"),
    ("variant", "full", "full | temporal_only | spatial_only"),
    ("dim_h", "64", "temporal hidden size, grid {32, 64, 128, 256}"),
    ("dim_z", "64", "spatial hidden size, grid {32, 64, 128, 256}"),
    ("k_layers", "2", "K, ReLU layers in f beyond the first, grid {1, 2, 3}"),
    ("embed_dim", "8", "C, node embedding size, grid 1..=10"),
    ("output_dim", "1", "M, predicted channels (the first M input features)"),
    ("time_channel", "true", "append observation time as an extra control-path channel"),
    ("solver", "rk4", "euler | rk4"),
    ("steps_per_unit", "1", "solver steps per observation interval"),
    ("lr", "1e-3", "Adam learning rate, grid {1e-2, 5e-3, 1e-3, 5e-4, 1e-4}"),
    ("weight_decay", "1e-3", "L2 coefficient, grid {1e-4, 1e-3, 1e-2}"),
    ("weight_decay_mode", "l2", "l2 (added to the gradient) | decoupled"),
    ("epochs", "200", "maximum training epochs"),
    ("batch_size", "64", "windows per optimizer step"),
    ("patience", "15", "epochs without validation improvement before stopping"),
    ("seed", "0", "seed for init, shuffling and masks"),
    ("missing_rate", "0", "fraction of input steps dropped per node, 0..0.5"),
    ("loss_space", "original", "original | normalized units for the L1 loss"),
    ("grad_clip", "null", "clip the global gradient norm to this value"),
    ("record_timing", "true", "write wall-clock seconds to the training log (0 when false)"),
];

pub fn valid_keys() -> Vec<&'static str> {
    CONFIG_KEYS.iter().map(|(k, _, _)| *k).collect()
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl TrainConfig {
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(map) = value else {
            return Err(ConfigError::Invalid("top level must be a JSON object".into()));
        };
        Self::from_map(map, overrides)
    }

    pub fn from_map(mut map: Map<String, Value>, overrides: &[String]) -> Result<Self, ConfigError> {
        // Comment keys are allowed in shipped templates.
        map.retain(|k, _| !k.starts_with('_'));
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::Override(item.clone()))?;
            map.insert(key.trim().to_string(), parse_value(raw.trim()));
        }
        let valid = valid_keys();
        if let Some(key) = map.keys().find(|k| !valid.contains(&k.as_str())) {
            return Err(ConfigError::UnknownKey {
                key: key.clone(),
                valid,
            });
        }
        let cfg: TrainConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; dataset paths are resolved against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.values_csv, &mut cfg.meta_json].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("dim_h", self.dim_h),
            ("dim_z", self.dim_z),
            ("k_layers", self.k_layers),
            ("embed_dim", self.embed_dim),
            ("output_dim", self.output_dim),
            ("steps_per_unit", self.steps_per_unit),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::Invalid("lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ConfigError::Invalid("weight_decay must be non-negative".into()));
        }
        if !(0.0..=0.5).contains(&self.missing_rate) {
            return Err(ConfigError::Invalid(format!(
                "missing_rate must lie in [0, 0.5], got {}",
                self.missing_rate
            )));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(ConfigError::Invalid("grad_clip must be positive".into()));
        }
        if !LR_GRID.contains(&self.lr) {
            log::warn!("lr {} is outside the reference grid {:?}", self.lr, LR_GRID);
        }
        if self.weight_decay > 0.0 && !WEIGHT_DECAY_GRID.contains(&self.weight_decay) {
            log::warn!(
                "weight_decay {} is outside the reference grid {:?}",
                self.weight_decay,
                WEIGHT_DECAY_GRID
            );
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            method: self.solver,
            steps_per_unit: self.steps_per_unit,
        }
    }

    /// Model dimensions for a dataset with `num_features` channels per node.
    pub fn model_dims(&self, num_nodes: usize, num_features: usize) -> ModelDims {
        ModelDims {
            num_nodes,
            input_dim: num_features + usize::from(self.time_channel),
            output_dim: self.output_dim,
            horizon: crate::data::HORIZON,
            dim_h: self.dim_h,
            dim_z: self.dim_z,
            k_layers: self.k_layers,
            embed_dim: self.embed_dim,
        }
    }
}

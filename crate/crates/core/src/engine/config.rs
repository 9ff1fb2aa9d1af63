//! Run configuration: one TOML document with `[data]`, `[model]` and `[train]`
//! tables. Every field has a default; unknown keys are rejected.

use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::ModelConfig;
use crate::synthetic_data::DataConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: [usize; 2],
    pub decay_target_lrs: [f64; 2],
    pub margin: f64,
    pub gamma_part: f64,
    pub mu: f64,
    pub theta: f64,
    pub n_ids: usize,
    pub n_per_id: usize,
    pub random_erasing_prob: f64,
    pub global_seed: u64,
    /// Evaluate on query/gallery every this many epochs (0 disables; the
    /// final epoch is always evaluated when enabled).
    pub eval_every: usize,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            base_lr: 3.5e-4,
            warmup_start_lr: 3.5e-5,
            warmup_epochs: 10,
            decay_epochs: [40, 70],
            decay_target_lrs: [3.5e-5, 3.5e-6],
            margin: 0.3,
            gamma_part: 0.35,
            mu: 0.5,
            theta: 0.1,
            n_ids: 8,
            n_per_id: 4,
            random_erasing_prob: 0.5,
            global_seed: 0,
            eval_every: 10,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            weight_decay: 5e-4,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [d0, d1] = self.decay_epochs;
        if !(self.warmup_epochs < d0 && d0 < d1 && d1 <= self.epochs) {
            return config_err(format!(
                "need warmup_epochs < decay_epochs[0] < decay_epochs[1] <= epochs, got {} < {d0} < {d1} <= {}",
                self.warmup_epochs, self.epochs
            ));
        }
        let lrs = [self.base_lr, self.warmup_start_lr, self.decay_target_lrs[0], self.decay_target_lrs[1]];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return config_err("learning rates must be positive and finite");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return config_err("margin must be non-negative");
        }
        if !(self.gamma_part >= 0.0 && self.gamma_part.is_finite()) {
            return config_err("gamma_part must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return config_err("mu must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.theta) {
            return config_err("theta must lie in [0, 1)");
        }
        if self.n_ids < 2 || self.n_per_id < 2 {
            return config_err("batches need n_ids >= 2 and n_per_id >= 2");
        }
        if !(0.0..=1.0).contains(&self.random_erasing_prob) {
            return config_err("random_erasing_prob must lie in [0, 1]");
        }
        let [b1, b2] = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return config_err("invalid Adam hyperparameters");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| crate::Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.n_parts != crate::synthetic_data::NUM_PARTS {
            return config_err(format!(
                "the synthetic data has {} parts, model expects {}",
                crate::synthetic_data::NUM_PARTS,
                self.model.n_parts
            ));
        }
        if self.train.n_ids > self.data.n_train_ids {
            return config_err("n_ids exceeds the number of training identities");
        }
        Ok(())
    }
}

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    /// Nesterov momentum.
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of each class held out for evaluation.
    pub holdout: f64,
    /// Stop once inference-mode training accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
    /// Synthetic corpus used when no data file is given.
    pub synthetic_classes: usize,
    pub synthetic_clips_per_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 10,
            peak_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 0,
            holdout: 0.2,
            stop_at_train_accuracy: None,
            synthetic_classes: 4,
            synthetic_clips_per_class: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be below epochs");
        }
        if !(self.peak_lr >= 0.0 && self.momentum >= 0.0 && self.momentum < 1.0 && self.weight_decay >= 0.0) {
            return bad("learning rate, momentum and weight decay must be non-negative, momentum below 1");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A config file: `[model]` and `[train]` tables, both optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.message().to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TrainError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Linear warmup from 0 to the peak, then a single cosine decay towards 0.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch >= cfg.epochs {
        return Err(TrainError::Config(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let (w, n) = (cfg.warmup_epochs as f64, cfg.epochs as f64);
    let e = epoch as f64;
    if epoch < cfg.warmup_epochs {
        return Ok(e / w * cfg.peak_lr);
    }
    Ok(cfg.peak_lr * 0.5 * (1.0 + (PI * (e - w) / (n - w)).cos()))
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimization and corruption settings shared by every loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Zero epochs is a valid no-op.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub mask_prob: f64,
    /// Classification-head dropout.
    pub dropout: f64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Keep the general encoder frozen while fine-tuning.
    pub frozen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            mask_prob: 0.15,
            dropout: 0.0,
            max_steps: None,
            frozen: true,
        }
    }
}

impl TrainConfig {
    /// Classification fine-tuning hyperparameters of the full-scale setup.
    pub fn full_scale_finetune() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 4e-5,
            dropout: 0.5,
            ..Self::default()
        }
    }

    /// Small-scale adaptive pretraining hyperparameters of the full-scale
    /// setup.
    pub fn full_scale_pretrain() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            lr: 4e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("adam epsilon must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config(format!("mask_prob {} outside [0, 1]", self.mask_prob)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

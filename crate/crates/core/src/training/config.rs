use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_t: f64,
    pub temperature: f64,
    /// Random square crop side; `None` trains on full frames.
    pub crop_size: Option<usize>,
    pub label_fraction: f64,
    /// Random horizontal and vertical flips.
    pub flip: bool,
    /// Run validation every this many epochs (the last epoch always runs).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            base_lr: 0.1,
            poly_power: 1.5,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            seed: 0,
            lambda_t: 1.0,
            temperature: 3.0,
            crop_size: None,
            label_fraction: 1.0,
            flip: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must satisfy T > 0, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 || self.lambda_t < 0.0 || self.poly_power < 0.0 {
            return Err(Error::Config(
                "weight_decay, lambda_t and poly_power must be non-negative".into(),
            ));
        }
        if self.crop_size == Some(0) {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_size: usize) -> usize {
        train_size.div_ceil(self.batch_size)
    }
}

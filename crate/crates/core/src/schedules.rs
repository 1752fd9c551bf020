//! Scalar training schedules: adversarial strength, distillation curriculum,
//! contrastive temperature decay, and the contrastive-weight ramp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Epochs with the distillation terms fully gated off.
    pub warmup_epochs: usize,
    /// Epochs over which the curriculum factor ramps 0 -> 1.
    pub ramp_epochs: usize,
    /// Starting contrastive temperature.
    pub t1: f64,
    /// Temperature floor.
    pub t_floor: f64,
    /// Contrastive weight at curriculum factor 0.
    pub beta_start: f64,
    /// Contrastive weight at curriculum factor 1.
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_epochs: 5,
            ramp_epochs: 10,
            t1: 2.0,
            t_floor: 0.5,
            beta_start: 0.1,
            beta_max: 0.5,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ramp_epochs < 1 {
            return Err(Error::validation("ramp_epochs", "must be >= 1"));
        }
        if !(self.t_floor > 0.0) {
            return Err(Error::validation("t_floor", "must be > 0"));
        }
        if self.t1 < self.t_floor {
            return Err(Error::validation("t1", "must be >= t_floor"));
        }
        if self.beta_start < 0.0 || self.beta_start > self.beta_max {
            return Err(Error::validation("beta_start", "need 0 <= beta_start <= beta_max"));
        }
        Ok(())
    }
}

/// Adversarial strength `2 / (1 + exp(-10 rho)) - 1` over training progress
/// `rho` in [0, 1]. Out-of-range inputs are clamped with a warning.
pub fn lambda_adv(rho: f64) -> f64 {
    let rho = if (0.0..=1.0).contains(&rho) {
        rho
    } else {
        log::warn!("lambda_adv: progress {rho} outside [0,1], clamping");
        rho.clamp(0.0, 1.0)
    };
    2.0 / (1.0 + (-10.0 * rho).exp()) - 1.0
}

/// Curriculum factor `clamp((epoch - warmup) / ramp, 0, 1)`.
pub fn curriculum(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    let x = (epoch as f64 - cfg.warmup_epochs as f64) / cfg.ramp_epochs as f64;
    x.clamp(0.0, 1.0)
}

/// Contrastive temperature `max(t_floor, t1 * 0.9^(epoch / 5))` with a
/// continuous (non-staircased) exponent.
pub fn temp_decay(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    (cfg.t1 * 0.9f64.powf(epoch as f64 / 5.0)).max(cfg.t_floor)
}

/// Contrastive weight, linear in the curriculum factor between
/// `beta_start` and `beta_max`.
pub fn beta_ramp(cf_value: f64, cfg: &ScheduleConfig) -> f64 {
    cfg.beta_start + cf_value * (cfg.beta_max - cfg.beta_start)
}

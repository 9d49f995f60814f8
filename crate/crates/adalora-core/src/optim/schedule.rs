//! Learning-rate schedule: a held warm-up rate, then linear decay to zero.
//!
//! Variational training starts slower than point-estimate training, so the
//! warm-up phase runs at a deliberately *higher* rate than the main phase;
//! both rates are plain config values.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    /// Steps (1-based, inclusive) that use `warmup_lr`.
    pub warmup_steps: u64,
    pub warmup_lr: f64,
    /// Peak rate of the decay phase, reached right after warm-up.
    pub base_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "schedule needs warmup_steps < total_steps, got {} / {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.warmup_lr > 0.0 && self.base_lr > 0.0)
            || !self.warmup_lr.is_finite()
            || !self.base_lr.is_finite()
        {
            return Err(Error::InvalidConfig(format!(
                "schedule rates must be finite and > 0, got warmup {} base {}",
                self.warmup_lr, self.base_lr
            )));
        }
        Ok(())
    }

    /// Rate for step `t` in `1..=total_steps`: `warmup_lr` through the
    /// warm-up, then `base_lr * (1 - progress)` decaying linearly to zero at
    /// the final step.
    pub fn lr_at(&self, t: u64) -> f64 {
        if t <= self.warmup_steps {
            self.warmup_lr
        } else {
            let span = (self.total_steps - self.warmup_steps) as f64;
            let progress = (t - self.warmup_steps) as f64 / span;
            self.base_lr * (1.0 - progress).max(0.0)
        }
    }
}

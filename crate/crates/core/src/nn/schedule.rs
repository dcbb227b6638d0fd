//! Learning-rate schedule: linear warm-up then step decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise schedule. During warm-up the rate ramps linearly as
/// `(iter + 1) / warmup_iters * base_lr`, ending exactly at `base_lr` on the
/// last warm-up iteration. Afterwards the rate is `base_lr` times the product
/// of every decay factor whose epoch has passed (a decay `(e, f)` applies
/// once `epoch > e`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub decay_epochs: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_iters: usize, decay_epochs: Vec<(usize, f64)>) -> Result<Self> {
        let s = LrSchedule {
            base_lr,
            warmup_iters,
            decay_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(base_lr: f64) -> Self {
        LrSchedule {
            base_lr,
            warmup_iters: 0,
            decay_epochs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        let mut prev: Option<usize> = None;
        for &(epoch, factor) in &self.decay_epochs {
            if let Some(p) = prev {
                if epoch <= p {
                    return Err(Error::config(format!(
                        "decay epochs must be strictly increasing ({p} then {epoch})"
                    )));
                }
            }
            prev = Some(epoch);
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(Error::config(format!(
                    "decay factor must be in (0, 1], got {factor}"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate at a global iteration count and epoch index.
    /// Warm-up takes precedence over decay.
    pub fn lr_at(&self, iter: usize, epoch: usize) -> f64 {
        if iter < self.warmup_iters {
            // Ratio first, so the ramp lands on base_lr exactly.
            return self.base_lr * ((iter + 1) as f64 / self.warmup_iters as f64);
        }
        let mut lr = self.base_lr;
        for &(e, f) in &self.decay_epochs {
            if epoch > e {
                lr *= f;
            }
        }
        lr
    }
}

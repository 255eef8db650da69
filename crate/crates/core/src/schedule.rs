//! Linear warmup followed by cosine decay to a floor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmup {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
    /// Final learning rate as a fraction of `peak`.
    pub min_frac: f64,
}

impl CosineWarmup {
    pub fn new(peak: f64, warmup: u64, total: u64, min_frac: f64) -> Result<Self> {
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {peak}")));
        }
        if warmup >= total {
            return Err(Error::Config(format!(
                "warmup steps ({warmup}) must be fewer than total steps ({total})"
            )));
        }
        if !(0.0..=1.0).contains(&min_frac) {
            return Err(Error::Config(format!("min LR fraction {min_frac} outside [0, 1]")));
        }
        Ok(Self {
            peak,
            warmup,
            total,
            min_frac,
        })
    }

    /// Warmup of 5% of `total` (rounded down) and a floor of 1% of `peak`.
    pub fn with_defaults(peak: f64, total: u64) -> Result<Self> {
        Self::new(peak, default_warmup(total), total, 0.01)
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total {
            return Err(Error::Config(format!(
                "step {step} is past the schedule end {}",
                self.total
            )));
        }
        if step <= self.warmup {
            if self.warmup == 0 {
                return Ok(self.peak);
            }
            return Ok(self.peak * step as f64 / self.warmup as f64);
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.peak * (self.min_frac + (1.0 - self.min_frac) * cosine))
    }
}

pub fn default_warmup(total: u64) -> u64 {
    total / 20
}

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub eval_interval: usize,
    pub eval_batches: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 1000,
            eval_interval: 100,
            eval_batches: 8,
            lr_peak: 3e-4,
            warmup_steps: 100,
            min_lr: 3e-5,
            betas: (0.9, 0.95),
            weight_decay: 0.1,
            grad_clip: 1.0,
            batch_size: 8,
            grad_accum: 1,
            seed: 0,
            eps: default_eps(),
        }
    }
}

impl TrainConfig {
    /// Config with `min_lr = lr_peak / 10` and the remaining defaults.
    pub fn with_peak(lr_peak: f64) -> Self {
        Self {
            lr_peak,
            min_lr: lr_peak / 10.0,
            ..Self::default()
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.max_steps == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return fail("max_steps, batch_size and grad_accum must be positive".into());
        }
        if self.eval_interval == 0 || self.eval_batches == 0 {
            return fail("eval_interval and eval_batches must be positive".into());
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr_peak) {
            return fail(format!(
                "need 0 < min_lr ≤ lr_peak, got min_lr={} lr_peak={}",
                self.min_lr, self.lr_peak
            ));
        }
        if self.warmup_steps >= self.max_steps {
            return fail(format!(
                "warmup_steps {} must be below max_steps {}",
                self.warmup_steps, self.max_steps
            ));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.weight_decay < 0.0 || !(self.grad_clip > 0.0) || !(self.eps > 0.0) {
            return fail("weight_decay must be ≥ 0; grad_clip and eps must be > 0".into());
        }
        Ok(())
    }

    /// Linear warmup from 0 to `lr_peak`, then cosine down to `min_lr` at
    /// `max_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_peak * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.max_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (1.0 + (PI * progress).cos()) * (self.lr_peak - self.min_lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::with_peak(1e-3);
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(c.warmup_steps), 1e-3);
        assert!((c.lr_at(c.max_steps) - 1e-4).abs() < 1e-15);
        assert!(c.lr_at(550) < 1e-3 && c.lr_at(550) > 1e-4);
    }

    #[test]
    fn validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            min_lr: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            warmup_steps: 1000,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn floor_ratio() -> f64 {
    0.01
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.95
}
fn eps() -> f64 {
    1e-8
}
fn weight_decay() -> f64 {
    0.1
}
fn clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default = "floor_ratio")]
    pub lr_floor_ratio: f64,
    #[serde(default = "beta1")]
    pub adam_beta1: f64,
    #[serde(default = "beta2")]
    pub adam_beta2: f64,
    #[serde(default = "eps")]
    pub adam_eps: f64,
    #[serde(default = "weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "clip")]
    pub clip_norm: f64,
    pub seed: u64,
    /// Also decay bandwidth thetas and value blends.
    #[serde(default)]
    pub decay_scalars: bool,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0 && self.seq_len > 0 && self.total_steps > 0 && self.lr_peak > 0.0;
        if !positive {
            return Err(Error::Config("batch_size, seq_len, total_steps and lr_peak must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        let in_unit = |x: f64| (0.0..1.0).contains(&x);
        if !(in_unit(self.adam_beta1) && in_unit(self.adam_beta2)) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.lr_floor_ratio > 0.0 && self.lr_floor_ratio <= 1.0) || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("lr_floor_ratio in (0, 1], weight_decay ≥ 0, clip_norm > 0".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine down to `lr_peak·lr_floor_ratio`.
pub fn lr_at(step: usize, c: &TrainConfig) -> f64 {
    let step = step.min(c.total_steps);
    if step < c.warmup_steps {
        return c.lr_peak * step as f64 / c.warmup_steps as f64;
    }
    let floor = c.lr_peak * c.lr_floor_ratio;
    let progress = (step - c.warmup_steps) as f64 / (c.total_steps - c.warmup_steps) as f64;
    floor + (c.lr_peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
pub(crate) fn tiny() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        seq_len: 16,
        lr_peak: 1e-2,
        warmup_steps: 10,
        total_steps: 110,
        lr_floor_ratio: 0.01,
        adam_beta1: 0.9,
        adam_beta2: 0.95,
        adam_eps: 1e-8,
        weight_decay: 0.1,
        clip_norm: 1.0,
        seed: 0,
        decay_scalars: false,
        checkpoint_every: 0,
    }
}

//! Adam with a bias-correction switch, polynomial-decay schedule with linear
//! warmup, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub bias_correction: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            bias_correction: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamConfig,
    sizes: Vec<usize>,
}

impl AdamState {
    /// State for a parameter list with the given element counts.
    pub fn new(sizes: &[usize], config: AdamConfig) -> Self {
        let total = sizes.iter().sum();
        Self {
            step: 0,
            m: vec![0.0; total],
            v: vec![0.0; total],
            config,
            sizes: sizes.to_vec(),
        }
    }

    /// One update. `grads[i]` belongs to `params[i]`, whose name is used in
    /// error messages. On error nothing is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], names: &[String], lr: f64) -> Result<()> {
        if params.len() != self.sizes.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params, {} grads, state for {}", params.len(), grads.len(), self.sizes.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map_or("?", String::as_str);
            if p.numel() != self.sizes[i] || g.len() != self.sizes[i] {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter '{name}': {} values, {} grads, state {}", p.numel(), g.len(), self.sizes[i]),
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric("adam_step", format!("non-finite gradient for parameter '{name}'")));
            }
        }
        if !(lr >= 0.0) {
            return Err(Error::InvalidInput(format!("learning rate {lr} must be >= 0")));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (corr1, corr2) = if c.bias_correction {
            (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t))
        } else {
            (1.0, 1.0)
        };
        let decay = 1.0 - lr * c.weight_decay;
        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            let m = &mut self.m[offset..offset + g.len()];
            let v = &mut self.v[offset..offset + g.len()];
            for (((w, &gi), mi), vi) in p.values_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                if c.weight_decay != 0.0 {
                    *w *= decay;
                }
                *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            offset += g.len();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_updates: u64,
    pub total_updates: u64,
    pub power: f64,
    pub end_lr: f64,
}

impl Schedule {
    /// Linear decay to zero with `round(warmup_fraction * total)` warmup updates.
    pub fn polynomial(peak_lr: f64, total_updates: u64, warmup_fraction: f64) -> Self {
        Self {
            peak_lr,
            warmup_updates: (warmup_fraction * total_updates as f64).round() as u64,
            total_updates,
            power: 1.0,
            end_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_updates == 0 && self.total_updates == 0 {
            return Err(Error::Config("schedule needs warmup or total updates > 0".into()));
        }
        if self.warmup_updates > self.total_updates {
            return Err(Error::Config(format!(
                "warmup {} exceeds total updates {}",
                self.warmup_updates, self.total_updates
            )));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr {} must be > 0", self.peak_lr)));
        }
        Ok(())
    }
}

/// Learning rate for update `t` (1-based).
pub fn lr_at(schedule: &Schedule, t: u64) -> Result<f64> {
    schedule.validate()?;
    if t == 0 {
        return Err(Error::InvalidInput("update index starts at 1".into()));
    }
    let Schedule {
        peak_lr,
        warmup_updates: w,
        total_updates: total,
        power,
        end_lr,
    } = *schedule;
    Ok(if t <= w {
        peak_lr * t as f64 / w as f64
    } else if t <= total {
        let frac = (total - t) as f64 / (total - w) as f64;
        end_lr + (peak_lr - end_lr) * frac.powf(power)
    } else {
        end_lr
    })
}

/// Scales all gradients by `max_norm / norm` when their global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidInput(format!("max_norm {max_norm} must be > 0")));
    }
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    Ok(norm)
}

//! Fine-tuning objectives: cross entropy and label smoothing, KL divergences,
//! the noise-smoothness regularizer (R3F, and R4F with a spectrally
//! normalized head), the SMART-style inner ascent, the FreeLB-style
//! adversarial loss, and the training loop that drives them.

mod fine_tune;
mod graph_losses;
mod losses;
mod methods;
mod noise;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fine_tune::{evaluate, fine_tune, EpochRecord, FineTuneOutcome, Model, RunStatus, TrainConfig};
pub use graph_losses::{
    forward_logits, freelb_objective, r3f_objective, register_model, smart_objective, symmetric_kl_rows,
    task_losses, ModelVars, ObjectiveNodes,
};
pub use losses::{
    cross_entropy, kl, label_smoothing_loss, symmetric_kl, validate_distribution, KL_ZERO_TOL, PROB_FLOOR,
};
pub use methods::{
    freelb_loss, freelb_trajectory, project, r3f_loss, smart_inner_ascent, smart_loss, standard_loss, training_step,
    Batch, LossReport, StepOutput,
};
pub use noise::sample_noise;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Standard,
    StandardPp,
    R3f,
    R4f,
    Smart,
    Freelb,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Standard,
        Method::StandardPp,
        Method::R3f,
        Method::R4f,
        Method::Smart,
        Method::Freelb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::StandardPp => "standard_pp",
            Method::R3f => "r3f",
            Method::R4f => "r4f",
            Method::Smart => "smart",
            Method::Freelb => "freelb",
        }
    }

    /// Whether the head must be spectrally normalized.
    pub fn spectral_head(self) -> bool {
        self == Method::R4f
    }

    /// Forward and backward passes per optimizer step.
    pub fn passes_per_step(self, ascent_steps: usize) -> (u64, u64) {
        let s = ascent_steps as u64;
        match self {
            Method::Standard | Method::StandardPp => (1, 1),
            Method::R3f | Method::R4f => (2, 1),
            Method::Smart | Method::Freelb => (1 + s, 1 + s),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDist {
    Normal,
    Uniform,
}

impl FromStr for NoiseDist {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(NoiseDist::Normal),
            "uniform" => Ok(NoiseDist::Uniform),
            other => Err(Error::Config(format!("unknown noise distribution '{other}'"))),
        }
    }
}

impl fmt::Display for NoiseDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseDist::Normal => "normal",
            NoiseDist::Uniform => "uniform",
        })
    }
}

/// Norm of the ball the adversarial perturbation is projected onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallNorm {
    L2,
    Linf,
}

impl FromStr for BallNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(BallNorm::L2),
            "linf" => Ok(BallNorm::Linf),
            other => Err(Error::Config(format!("unknown ball norm '{other}'"))),
        }
    }
}

impl fmt::Display for BallNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BallNorm::L2 => "l2",
            BallNorm::Linf => "linf",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub method: Method,
    pub lambda: f64,
    pub noise_dist: NoiseDist,
    pub sigma: f64,
    pub epsilon: f64,
    pub ascent_steps: usize,
    pub ascent_lr: f64,
    pub label_smoothing_alpha: f64,
    pub ball_norm: BallNorm,
}

/// Search grid for the regularization weight.
pub const LAMBDA_GRID: [f64; 4] = [0.1, 0.5, 1.0, 5.0];

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Standard,
            lambda: 1.0,
            noise_dist: NoiseDist::Normal,
            sigma: 1e-5,
            epsilon: 1e-5,
            ascent_steps: 1,
            ascent_lr: 1e-3,
            label_smoothing_alpha: 0.0,
            ball_norm: BallNorm::L2,
        }
    }
}

impl RegularizerConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma {} must be finite and >= 0", self.sigma)));
        }
        if matches!(self.method, Method::Smart | Method::Freelb) {
            if !(self.epsilon > 0.0) {
                return Err(Error::Config(format!("epsilon {} must be > 0", self.epsilon)));
            }
            if self.ascent_steps == 0 {
                return Err(Error::Config("ascent_steps must be >= 1".into()));
            }
            if !(self.ascent_lr > 0.0) {
                return Err(Error::Config(format!("ascent_lr {} must be > 0", self.ascent_lr)));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing_alpha) {
            return Err(Error::Config(format!(
                "label_smoothing_alpha {} outside [0, 1)",
                self.label_smoothing_alpha
            )));
        }
        Ok(())
    }
}

//! Desk-scale laboratory for noise-regularized fine-tuning (R3F / R4F), the
//! adversarial SMART and FreeLB baselines, and representational-collapse
//! probing on a tiny trainable token encoder.

// `!(x > 0.0)` is how NaN-rejecting range checks are written throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod config;
pub mod error;
pub mod experiments;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod runner;
pub mod svg;
pub mod tasks;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::Tensor;

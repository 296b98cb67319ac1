//! Spectral normalization by power iteration.
//!
//! For a weight `W` the state holds a left vector `u` and a right vector `v`.
//! Each round does `u <- normalize(W v)`, `v <- normalize(W^T u)`, and the
//! estimate is `sigma = u^T W v`. Because `u` and `v` are unit vectors the
//! estimate never exceeds the true largest singular value.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::named_stream;
use crate::tensor::{matmul_raw, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
    /// Empty until the first iteration derives it from `u`.
    pub v: Vec<f64>,
}

fn normalize(x: &mut [f64], op: &'static str) -> Result<()> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::numeric(op, format!("cannot normalize vector of norm {norm}")));
    }
    x.iter_mut().for_each(|v| *v /= norm);
    Ok(())
}

impl SpectralState {
    /// Random unit `u` of length `rows` drawn from a stream keyed by `seed`.
    pub fn seeded(rows: usize, seed: u64) -> Self {
        let mut rng = named_stream(seed, "spectral-u");
        loop {
            let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
            if normalize(&mut u, "spectral_state").is_ok() {
                return Self { u, v: Vec::new() };
            }
        }
    }

    pub fn from_u(u: Vec<f64>) -> Result<Self> {
        let mut u = u;
        normalize(&mut u, "spectral_state")?;
        Ok(Self { u, v: Vec::new() })
    }

    /// `u^T W v` for the current vectors.
    pub fn estimate(&self, w: &Tensor) -> f64 {
        let (r, c) = w.dims2();
        let wv = matmul_raw(w.values(), &self.v, r, c, 1);
        self.u.iter().zip(&wv).map(|(a, b)| a * b).sum()
    }
}

/// Runs `iters` power-iteration rounds on `state` and returns the estimate.
pub fn power_iterate(w: &Tensor, state: &mut SpectralState, iters: usize) -> Result<f64> {
    let (r, c) = w.dims2();
    if state.u.len() != r || (!state.v.is_empty() && state.v.len() != c) {
        return Err(Error::shape(
            "spectral_normalize",
            format!("state ({}, {}) vs weight ({r}, {c})", state.u.len(), state.v.len()),
        ));
    }
    if w.values().iter().all(|&x| x == 0.0) {
        return Err(Error::numeric("spectral_normalize", "zero matrix has no spectral norm"));
    }
    let wt = w.transpose();
    if state.v.is_empty() {
        let mut v = matmul_raw(wt.values(), &state.u, c, r, 1);
        normalize(&mut v, "spectral_normalize")?;
        state.v = v;
    }
    for _ in 0..iters {
        let mut u = matmul_raw(w.values(), &state.v, r, c, 1);
        normalize(&mut u, "spectral_normalize")?;
        let mut v = matmul_raw(wt.values(), &u, c, r, 1);
        normalize(&mut v, "spectral_normalize")?;
        state.u = u;
        state.v = v;
    }
    Ok(state.estimate(w))
}

/// `(W / sigma, updated state, sigma)` after `iters` rounds from `state`.
pub fn spectral_normalize(w: &Tensor, state: &SpectralState, iters: usize) -> Result<(Tensor, SpectralState, f64)> {
    if iters == 0 {
        return Err(Error::InvalidInput("spectral_normalize needs iters >= 1".into()));
    }
    let mut next = state.clone();
    let sigma = power_iterate(w, &mut next, iters)?;
    if !(sigma > 0.0) {
        return Err(Error::numeric("spectral_normalize", format!("estimate {sigma} is not positive")));
    }
    let vals = w.values().iter().map(|x| x / sigma).collect();
    Ok((Tensor::new(w.shape().to_vec(), vals)?, next, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_norm() {
        let st = SpectralState::from_u(vec![0.6, 0.8]).unwrap();
        let (wn, _, s) = spectral_normalize(&Tensor::identity(2), &st, 1).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(wn.values(), Tensor::identity(2).values());
    }

    #[test]
    fn diagonal_converges_to_largest_entry() {
        let w = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let st = SpectralState::from_u(vec![1.0, 1.0]).unwrap();
        let (_, _, s) = spectral_normalize(&w, &st, 25).unwrap();
        assert!((s - 3.0).abs() <= 1e-6, "{s}");
    }

    #[test]
    fn zero_matrix_is_error() {
        let st = SpectralState::seeded(2, 1);
        assert!(spectral_normalize(&Tensor::zeros(&[2, 2]), &st, 3).is_err());
        assert!(spectral_normalize(&Tensor::identity(2), &st, 0).is_err());
    }
}

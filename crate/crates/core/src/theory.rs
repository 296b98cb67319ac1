//! Closed-form Gaussian KL divergences under linear pushforwards: the
//! numerical check that a spectral-norm-1 map cannot create divergence
//! between two representation densities.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::named_stream;

/// Tolerance for KL equality under invertible maps.
pub const INVERTIBLE_TOL: f64 = 1e-8;
/// Slack for the data-processing direction under rank-reducing maps.
pub const REDUCING_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianDensity {
    /// Errors unless the covariance is square, symmetric within 1e-12 and
    /// positive definite.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.shape() != (d, d) {
            return Err(Error::shape(
                "gaussian",
                format!("mean of length {d} with covariance {:?}", covariance.shape()),
            ));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("gaussian", "non-finite parameters"));
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::InvalidInput(format!("covariance asymmetric by {asym:e}")));
        }
        let min_eig = covariance.clone().symmetric_eigenvalues().min();
        if !(min_eig > 0.0) {
            return Err(Error::InvalidInput(format!(
                "covariance not positive definite (smallest eigenvalue {min_eig:e})"
            )));
        }
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::InvalidInput("covariance not positive definite".into()))?;
        Ok(Self { mean, covariance, chol })
    }

    pub fn standard(d: usize) -> Result<Self> {
        Self::new(DVector::zeros(d), DMatrix::identity(d, d))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    fn ln_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

impl PartialEq for GaussianDensity {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.covariance == other.covariance
    }
}

/// `KL(a || b)` in closed form.
pub fn gaussian_kl(a: &GaussianDensity, b: &GaussianDensity) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::shape("gaussian_kl", format!("dimensions {d} and {}", b.dim())));
    }
    let trace = b.chol.solve(&a.covariance).trace();
    let diff = &b.mean - &a.mean;
    let maha = diff.dot(&b.chol.solve(&diff));
    Ok(0.5 * (trace + maha - d as f64 + b.ln_det() - a.ln_det()))
}

/// Density of `G x` for `x ~ a`: mean `G mu`, covariance `G Sigma G^T`.
pub fn pushforward(g: &DMatrix<f64>, a: &GaussianDensity) -> Result<GaussianDensity> {
    if g.ncols() != a.dim() || g.nrows() == 0 {
        return Err(Error::shape(
            "pushforward",
            format!("map {:?} on a {}-dimensional density", g.shape(), a.dim()),
        ));
    }
    let cov = g * &a.covariance * g.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianDensity::new(g * &a.mean, cov).map_err(|e| match e {
        Error::InvalidInput(detail) => Error::InvalidInput(format!("rank-deficient pushforward: {detail}")),
        other => other,
    })
}

pub fn spectral_norm(g: &DMatrix<f64>) -> f64 {
    g.clone().singular_values().max()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub dim_in: usize,
    pub dim_out: usize,
    /// `|det G|` for square maps; `None` when the map is rectangular.
    pub abs_det: Option<f64>,
    pub kl_repr: f64,
    pub kl_output: f64,
    pub invertible: bool,
    /// `equal`, `decrease` or `increase`, judged with the trial's tolerance.
    pub relation: String,
    pub passed: bool,
}

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn random_gaussian(rng: &mut impl Rng, d: usize) -> Result<GaussianDensity> {
    let m = random_matrix(rng, d, d);
    let cov = &m * m.transpose() + DMatrix::identity(d, d) * 0.5;
    let cov = (&cov + cov.transpose()) * 0.5;
    let mean = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
    GaussianDensity::new(mean, cov)
}

/// Map with spectral norm 1: square and invertible on even trials,
/// `k x d` with `k < d` on odd trials.
fn random_map(rng: &mut impl Rng, d: usize, invertible: bool) -> DMatrix<f64> {
    loop {
        let rows = if invertible { d } else { rng.random_range(1..d) };
        let g = random_matrix(rng, rows, d);
        let s = g.clone().singular_values();
        // Redraw near-singular maps so the equality check measures the
        // identity, not conditioning.
        if s.min() > 1e-3 * s.max() {
            return g / s.max();
        }
    }
}

/// Per trial: two random Gaussians standing for the representation density
/// before and after an update, a random map `G` with spectral norm 1, and the
/// KL before and after pushing both through `G`. Invertible maps must
/// preserve the KL; rank-reducing maps must not increase it.
pub fn lipschitz_bound_experiment(dim: usize, trials: usize, seed: u64) -> Result<Vec<TrialRecord>> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    if dim < 2 {
        return Err(Error::Config(format!("dim must be >= 2, got {dim}")));
    }
    (0..trials)
        .map(|t| {
            let mut rng = named_stream(seed, &format!("theory-trial{t}"));
            let invertible = t % 2 == 0;
            let a = random_gaussian(&mut rng, dim)?;
            let b = random_gaussian(&mut rng, dim)?;
            let g = random_map(&mut rng, dim, invertible);
            let kl_repr = gaussian_kl(&a, &b)?;
            let kl_output = gaussian_kl(&pushforward(&g, &a)?, &pushforward(&g, &b)?)?;
            let tol = if invertible { INVERTIBLE_TOL } else { REDUCING_TOL };
            let relation = if (kl_output - kl_repr).abs() <= tol {
                "equal"
            } else if kl_output < kl_repr {
                "decrease"
            } else {
                "increase"
            };
            let passed = if invertible { relation == "equal" } else { relation != "increase" };
            Ok(TrialRecord {
                trial: t,
                dim_in: dim,
                dim_out: g.nrows(),
                abs_det: invertible.then(|| g.determinant().abs()),
                kl_repr,
                kl_output,
                invertible,
                relation: relation.to_string(),
                passed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(mean: f64, var: f64) -> GaussianDensity {
        GaussianDensity::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)).unwrap()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(gaussian_kl(&g1(0.0, 1.0), &g1(0.0, 1.0)).unwrap(), 0.0);
        assert!((gaussian_kl(&g1(0.0, 1.0), &g1(1.0, 1.0)).unwrap() - 0.5).abs() <= 1e-12);
        let expected = 0.5 * (0.25 - 1.0 + 4f64.ln());
        assert!((gaussian_kl(&g1(0.0, 1.0), &g1(0.0, 4.0)).unwrap() - expected).abs() <= 1e-12);
        assert!((expected - 0.318147).abs() <= 1e-6);
    }

    #[test]
    fn pushforward_cases() {
        let n = GaussianDensity::standard(2).unwrap();
        let same = pushforward(&DMatrix::identity(2, 2), &n).unwrap();
        assert_eq!(same, n);
        let doubled = pushforward(&(DMatrix::identity(2, 2) * 2.0), &n).unwrap();
        assert_eq!(doubled.covariance(), &(DMatrix::identity(2, 2) * 4.0));
        let proj = pushforward(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), &n).unwrap();
        assert_eq!(proj.covariance()[(0, 0)], 1.0);
        assert_eq!(proj.mean()[0], 0.0);
    }

    #[test]
    fn invalid_densities_are_rejected() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianDensity::new(DVector::zeros(2), asym).is_err());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(GaussianDensity::new(DVector::zeros(2), singular).is_err());
        let n = GaussianDensity::standard(2).unwrap();
        let collapse = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(pushforward(&collapse, &n).is_err());
    }

    #[test]
    fn zero_trials_is_a_config_error() {
        assert!(matches!(lipschitz_bound_experiment(3, 0, 0), Err(Error::Config(_))));
    }
}

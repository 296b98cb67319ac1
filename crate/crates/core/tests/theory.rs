use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use trusttune::rng::named_stream;
use trusttune::theory::{gaussian_kl, lipschitz_bound_experiment, pushforward, spectral_norm, GaussianDensity};

fn density(mean: &[f64], cov: &[f64]) -> GaussianDensity {
    let d = mean.len();
    GaussianDensity::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(d, d, cov)).unwrap()
}

fn log_density(g: &GaussianDensity, x: &DVector<f64>) -> f64 {
    let d = g.dim() as f64;
    let chol = g.covariance().clone().cholesky().unwrap();
    let diff = x - g.mean();
    let sol = chol.solve(&diff);
    let ln_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (diff.dot(&sol) + ln_det + d * (2.0 * std::f64::consts::PI).ln())
}

/// Sample mean and standard error of `ln a(x) - ln b(x)` over `x ~ a`.
fn monte_carlo_kl(a: &GaussianDensity, b: &GaussianDensity, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = named_stream(seed, "mc-kl");
    let l = a.covariance().clone().cholesky().unwrap().l();
    let d = a.dim();
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = a.mean() + &l * z;
        let v = log_density(a, &x) - log_density(b, &x);
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean) * n as f64 / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[test]
fn closed_form_kl_agrees_with_monte_carlo() {
    let cases = [
        (density(&[0.0], &[1.0]), density(&[1.0], &[1.0])),
        (density(&[0.0], &[1.0]), density(&[0.0], &[4.0])),
        (
            density(&[0.3, -0.2], &[1.0, 0.3, 0.3, 0.8]),
            density(&[-0.1, 0.4], &[1.5, -0.2, -0.2, 0.6]),
        ),
        (
            density(&[0.0, 0.5, -0.5], &[1.0, 0.2, 0.0, 0.2, 1.2, 0.1, 0.0, 0.1, 0.7]),
            density(&[0.2, 0.0, 0.1], &[0.9, 0.0, 0.1, 0.0, 1.0, -0.2, 0.1, -0.2, 1.4]),
        ),
    ];
    for (i, (a, b)) in cases.iter().enumerate() {
        let exact = gaussian_kl(a, b).unwrap();
        let (mc, se) = monte_carlo_kl(a, b, 1_000_000, i as u64);
        assert!((mc - exact).abs() <= 3.0 * se, "case {i}: closed {exact} vs mc {mc} +- {se}");
    }
}

#[test]
fn identity_map_preserves_the_kl_exactly() {
    let a = density(&[0.3, -0.2], &[1.0, 0.3, 0.3, 0.8]);
    let b = density(&[-0.1, 0.4], &[1.5, -0.2, -0.2, 0.6]);
    let id = DMatrix::identity(2, 2);
    assert_eq!(pushforward(&id, &a).unwrap(), a);
    assert_eq!(
        gaussian_kl(&pushforward(&id, &a).unwrap(), &pushforward(&id, &b).unwrap()).unwrap(),
        gaussian_kl(&a, &b).unwrap()
    );
}

#[test]
fn experiment_records_both_regimes() {
    let trials = lipschitz_bound_experiment(4, 40, 3).unwrap();
    assert_eq!(trials.len(), 40);
    for t in &trials {
        assert!(t.passed, "trial {}: {} -> {}", t.trial, t.kl_repr, t.kl_output);
        if t.invertible {
            assert_eq!(t.dim_out, 4);
            assert!(t.abs_det.unwrap() > 0.0 && t.abs_det.unwrap() <= 1.0 + 1e-12);
        } else {
            assert!(t.dim_out < 4 && t.abs_det.is_none());
        }
    }
    assert_eq!(trials, lipschitz_bound_experiment(4, 40, 3).unwrap());
}

fn spd(vals: &[f64], d: usize) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(d, d, vals);
    &m * m.transpose() + DMatrix::identity(d, d) * 0.1
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_on_the_diagonal(
        ma in prop::collection::vec(-2.0f64..2.0, 3),
        mb in prop::collection::vec(-2.0f64..2.0, 3),
        ca in prop::collection::vec(-1.5f64..1.5, 9),
        cb in prop::collection::vec(-1.5f64..1.5, 9),
    ) {
        let a = GaussianDensity::new(DVector::from_vec(ma), spd(&ca, 3)).unwrap();
        let b = GaussianDensity::new(DVector::from_vec(mb), spd(&cb, 3)).unwrap();
        prop_assert!(gaussian_kl(&a, &b).unwrap() >= -1e-12);
        prop_assert!(gaussian_kl(&a, &a).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn invertible_maps_preserve_kl_and_full_rank_maps_keep_spd(
        ca in prop::collection::vec(-1.5f64..1.5, 4),
        cb in prop::collection::vec(-1.5f64..1.5, 4),
        g in prop::collection::vec(-2.0f64..2.0, 4),
        mb in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let g = DMatrix::from_row_slice(2, 2, &g);
        let s = g.clone().singular_values();
        prop_assume!(s.min() > 0.05 * s.max());
        let g = &g / spectral_norm(&g);
        let a = GaussianDensity::new(DVector::zeros(2), spd(&ca, 2)).unwrap();
        let b = GaussianDensity::new(DVector::from_vec(mb), spd(&cb, 2)).unwrap();
        let (ga, gb) = (pushforward(&g, &a).unwrap(), pushforward(&g, &b).unwrap());
        prop_assert!(ga.covariance().clone().cholesky().is_some());
        let before = gaussian_kl(&a, &b).unwrap();
        let after = gaussian_kl(&ga, &gb).unwrap();
        prop_assert!((after - before).abs() <= 1e-8 * (1.0 + before), "{before} vs {after}");
    }

    #[test]
    fn projections_never_increase_kl(
        ca in prop::collection::vec(-1.5f64..1.5, 9),
        cb in prop::collection::vec(-1.5f64..1.5, 9),
        row in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        prop_assume!(row.iter().any(|v| v.abs() > 0.1));
        let g = DMatrix::from_row_slice(1, 3, &row);
        let g = &g / spectral_norm(&g);
        let a = GaussianDensity::new(DVector::zeros(3), spd(&ca, 3)).unwrap();
        let b = GaussianDensity::new(DVector::from_element(3, 0.5), spd(&cb, 3)).unwrap();
        let before = gaussian_kl(&a, &b).unwrap();
        let after = gaussian_kl(&pushforward(&g, &a).unwrap(), &pushforward(&g, &b).unwrap()).unwrap();
        prop_assert!(after <= before + 1e-10, "{before} -> {after}");
    }
}

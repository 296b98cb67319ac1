use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use trusttune::model::{power_iterate, spectral_normalize, SpectralState};
use trusttune::rng::named_stream;
use trusttune::tensor::Tensor;

fn largest_singular_value(t: &Tensor) -> f64 {
    let (r, c) = t.dims2();
    DMatrix::from_row_slice(r, c, t.values()).singular_values().max()
}

fn random_weight(rng: &mut impl Rng) -> Tensor {
    let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn top_two(t: &Tensor) -> (f64, f64) {
    let (r, c) = t.dims2();
    let mut s: Vec<f64> = DMatrix::from_row_slice(r, c, t.values()).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    (s[0], s.get(1).copied().unwrap_or(0.0))
}

/// The estimate error shrinks like `(s2/s1)^(4k)` after `k` rounds, so
/// matrices with a clear spectral gap reach 1e-6 in 50 rounds and the
/// normalized weight then has unit norm.
#[test]
fn fifty_iterations_match_the_svd_oracle_when_the_gap_allows() {
    let mut rng = named_stream(0, "spectral-test");
    let mut checked = 0;
    for i in 0..200 {
        let w = random_weight(&mut rng);
        let (s1, s2) = top_two(&w);
        let st = SpectralState::seeded(w.dims2().0, i);
        let (wn, _, sigma) = spectral_normalize(&w, &st, 50).unwrap();
        assert!(sigma <= s1 * (1.0 + 1e-12), "matrix {i}: estimate {sigma} above {s1}");
        if s2 / s1 > 0.9 {
            continue;
        }
        checked += 1;
        assert!((sigma - s1).abs() <= 1e-6 * s1, "matrix {i}: {sigma} vs {s1}");
        let normalized = largest_singular_value(&wn);
        assert!((normalized - 1.0).abs() <= 1e-6, "matrix {i}: normalized norm {normalized}");
    }
    assert!(checked >= 150, "only {checked} matrices had a clear gap");
}

#[test]
fn diagonal_example_is_exact() {
    let w = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
    let st = SpectralState::from_u(vec![0.6, 0.8]).unwrap();
    let (wn, _, sigma) = spectral_normalize(&w, &st, 50).unwrap();
    assert_eq!(sigma, 2.0);
    assert_eq!(wn.values(), &[1.0, 0.0, 0.0, 0.5]);
}

proptest! {
    #[test]
    fn estimate_never_exceeds_the_largest_singular_value(
        vals in prop::collection::vec(-3.0f64..3.0, 12),
        iters in 1usize..20,
        seed in 0u64..1000,
    ) {
        let w = Tensor::matrix(3, 4, vals).unwrap();
        prop_assume!(w.values().iter().any(|v| v.abs() > 1e-3));
        let mut st = SpectralState::seeded(3, seed);
        let est = power_iterate(&w, &mut st, iters).unwrap();
        prop_assert!(est <= largest_singular_value(&w) * (1.0 + 1e-12));
    }

    #[test]
    fn scaling_the_weight_leaves_the_normalized_weight_unchanged(
        vals in prop::collection::vec(-3.0f64..3.0, 6),
        scale in 0.1f64..10.0,
    ) {
        let w = Tensor::matrix(2, 3, vals.clone()).unwrap();
        prop_assume!(w.values().iter().any(|v| v.abs() > 1e-2));
        let ws = Tensor::matrix(2, 3, vals.iter().map(|v| v * scale).collect()).unwrap();
        let st = SpectralState::seeded(2, 7);
        let (a, _, _) = spectral_normalize(&w, &st, 30).unwrap();
        let (b, _, _) = spectral_normalize(&ws, &st, 30).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}

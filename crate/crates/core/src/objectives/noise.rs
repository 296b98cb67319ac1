use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NoiseDist, RegularizerConfig};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// i.i.d. `N(0, sigma^2)` or `U(-sigma, sigma)` entries of shape `[rows, cols]`.
/// `sigma = 0` gives exact zeros without touching the stream.
pub fn sample_noise(rows: usize, cols: usize, cfg: &RegularizerConfig, rng: &mut StreamRng) -> Tensor {
    let sigma = cfg.sigma;
    let values = if sigma == 0.0 {
        vec![0.0; rows * cols]
    } else {
        match cfg.noise_dist {
            NoiseDist::Normal => {
                let d = Normal::new(0.0, sigma).expect("sigma validated");
                (0..rows * cols).map(|_| d.sample(rng)).collect()
            }
            NoiseDist::Uniform => (0..rows * cols).map(|_| rng.random_range(-sigma..=sigma)).collect(),
        }
    };
    Tensor::matrix(rows, cols, values).expect("positive noise shape")
}

//! Central finite-difference gradient checking.

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error `|a - b| / max(1e-8, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-8f64.max(a.abs()).max(b.abs())
}

/// Compares the analytic gradient of the scalar produced by `build` with
/// central differences `(f(x+h) - f(x-h)) / 2h` for every entry of every
/// parameter, returning the largest relative error.
///
/// `build` receives a fresh graph and one trainable leaf per parameter, in
/// order, and must return a scalar node.
pub fn check_gradients<F>(build: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidInput(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    g.begin_forward_pass();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(id, p)| g.grad(*id).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        g.begin_forward_pass();
        let ids: Vec<NodeId> = perturbed.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let v = g.value(loss).values()[0];
        if !v.is_finite() {
            return Err(Error::numeric("check_gradients", "non-finite loss at perturbed point"));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.numel() {
            let orig = p.values()[k];
            work[pi].values_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[pi].values_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[pi].values_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[pi][k], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let w = Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap();
        let err = check_gradients(
            |g, ids| {
                let c = g.constant(Tensor::vector(vec![1.5, -0.5, 0.25]).unwrap());
                let p = g.mul(ids[0], c)?;
                g.sum(p)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let w = Tensor::vector(vec![1.0]).unwrap();
        assert!(check_gradients(|g, ids| g.sum(ids[0]), &[w], 0.0).is_err());
    }

    #[test]
    fn non_finite_perturbed_loss_is_error() {
        // ln(x) at x = 1e-6 with h = 1e-5 crosses the floor into -inf territory.
        let w = Tensor::vector(vec![1e-6]).unwrap();
        let r = check_gradients(
            |g, ids| {
                let l = g.log(ids[0], 0.0)?;
                g.sum(l)
            },
            &[w],
            1e-5,
        );
        assert!(r.is_err());
    }
}

//! Scalar losses and divergences on explicit probability vectors.

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Below this max-abs difference two distributions count as identical.
pub const KL_ZERO_TOL: f64 = 1e-12;

pub fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty vector".into()));
    }
    if let Some(bad) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidDistribution(format!("entry {bad} is not a probability")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
    }
    Ok(())
}

/// `-ln probs[label]` with the probability floored.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    validate_distribution(probs)?;
    let p = probs
        .get(label)
        .ok_or_else(|| Error::InvalidInput(format!("label {label} >= {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Cross entropy against `(1 - alpha) onehot(label) + alpha uniform(q)`.
pub fn label_smoothing_loss(probs: &[f64], label: usize, alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside [0, 1)")));
    }
    if alpha == 0.0 {
        return cross_entropy(probs, label);
    }
    validate_distribution(probs)?;
    let q = probs.len();
    if label >= q {
        return Err(Error::InvalidInput(format!("label {label} >= {q} classes")));
    }
    let off = alpha / q as f64;
    Ok(-probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = if i == label { 1.0 - alpha + off } else { off };
            t * p.max(PROB_FLOOR).ln()
        })
        .sum::<f64>())
}

/// `r ln r - r + 1` for `r = 1 + d`, which is nonnegative; a series near
/// `d = 0` avoids cancellation.
fn bregman_term(d: f64) -> f64 {
    if d.abs() < 1e-4 {
        let d2 = d * d;
        d2 / 2.0 - d2 * d / 6.0 + d2 * d2 / 12.0 - d2 * d2 * d / 20.0
    } else {
        (1.0 + d) * d.ln_1p() - d
    }
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
///
/// Evaluated as `sum q_i h(p_i / q_i)` with `h(r) = r ln r - r + 1`, which
/// equals the plain sum for normalized inputs and is nonnegative term by term.
/// Distributions within [`KL_ZERO_TOL`] of each other give exactly zero.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    validate_distribution(p)?;
    validate_distribution(q)?;
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!("lengths {} and {}", p.len(), q.len())));
    }
    if let Some(i) = (0..p.len()).find(|&i| q[i] == 0.0 && p[i] > 0.0) {
        return Err(Error::InfiniteDivergence(format!(
            "q[{i}] = 0 where p[{i}] = {}",
            p[i]
        )));
    }
    let max_diff = p.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if max_diff <= KL_ZERO_TOL {
        return Ok(0.0);
    }
    Ok(p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let qi = qi.max(PROB_FLOOR);
            if pi == 0.0 {
                qi
            } else {
                qi * bregman_term((pi - qi) / qi)
            }
        })
        .sum())
}

/// `KL(p || q) + KL(q || p)`.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(kl(p, q)? + kl(q, p)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert!((cross_entropy(&[0.9, 0.1], 1).unwrap() - 10f64.ln()).abs() < 1e-12);
        let ls = label_smoothing_loss(&[0.9, 0.1], 0, 0.1).unwrap();
        assert!((ls - 0.215221).abs() < 1e-6, "{ls}");
        let k = kl(&[0.75, 0.25], &[0.25, 0.75]).unwrap();
        assert!((k - 0.5 * 3f64.ln()).abs() < 1e-12);
        assert!((kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((symmetric_kl(&[0.75, 0.25], &[0.25, 0.75]).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert_eq!(label_smoothing_loss(&[0.3, 0.7], 1, 0.0).unwrap(), cross_entropy(&[0.3, 0.7], 1).unwrap());
        assert_eq!(kl(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!(matches!(kl(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::InfiniteDivergence(_))));
        assert!(matches!(cross_entropy(&[0.5, 0.6], 0), Err(Error::InvalidDistribution(_))));
    }
}

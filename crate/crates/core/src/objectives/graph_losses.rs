//! Differentiable objective builders shared by the training step and the
//! gradient checks.

use super::RegularizerConfig;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{encode_batch, head_logits, EncoderParams, EncoderVars, HeadParams, HeadVars};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

impl ModelVars {
    /// Encoder ids followed by head ids, matching the parameter order used
    /// for gradients and optimizer state.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = self.encoder.ids();
        ids.extend(self.head.ids());
        ids
    }

    pub fn from_ids(encoder: &EncoderParams, head: &HeadParams, ids: &[NodeId]) -> Self {
        let k = encoder.num_tensors();
        Self {
            encoder: encoder.vars_from(&ids[..k]),
            head: head.vars_from(&ids[k..]),
        }
    }
}

pub fn register_model(g: &mut Graph, encoder: &EncoderParams, head: &HeadParams, trainable: bool) -> ModelVars {
    ModelVars {
        encoder: encoder.register(g, trainable),
        head: head.register(g, trainable),
    }
}

/// Head scores `[b, q]`; the optional perturbation is added to the embedded
/// input. The caller records the forward pass on the graph.
pub fn forward_logits(
    g: &mut Graph,
    encoder: &EncoderParams,
    head: &HeadParams,
    vars: &ModelVars,
    tokens: &[&[u32]],
    perturbation: Option<NodeId>,
) -> Result<NodeId> {
    let r = encode_batch(g, &vars.encoder, &encoder.config, tokens, perturbation)?;
    head_logits(g, head, &vars.head, r)
}

/// Per-example task loss `[b]`: cross entropy, or label-smoothed cross
/// entropy when `alpha > 0`.
pub fn task_losses(g: &mut Graph, logits: NodeId, labels: &[usize], alpha: f64) -> Result<NodeId> {
    let q = g.value(logits).cols();
    let logp = g.log_softmax(logits)?;
    let picked = g.pick_cols(logp, labels)?;
    if alpha == 0.0 {
        return g.scale(picked, -1.0);
    }
    let all = g.sum_rows(logp)?;
    let a = g.scale(picked, -(1.0 - alpha))?;
    let b = g.scale(all, -alpha / q as f64)?;
    g.add(a, b)
}

/// Per-example symmetric KL between the softmaxes of two score matrices:
/// `sum_j (p_j - q_j)(ln p_j - ln q_j)`.
pub fn symmetric_kl_rows(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (pa, pb) = (g.softmax(a)?, g.softmax(b)?);
    let (la, lb) = (g.log_softmax(a)?, g.log_softmax(b)?);
    let dp = g.sub(pa, pb)?;
    let dl = g.sub(la, lb)?;
    let prod = g.mul(dp, dl)?;
    g.sum_rows(prod)
}

/// Scalar nodes of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    pub total: NodeId,
    pub task: NodeId,
    pub reg: NodeId,
}

fn check_labels(labels: &[usize], tokens: &[&[u32]]) -> Result<()> {
    if labels.len() != tokens.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} sequences",
            labels.len(),
            tokens.len()
        )));
    }
    Ok(())
}

/// Mean over the batch of `task + lambda * KL_S(clean, noisy)`, recording two
/// forward passes. Gradients flow through both branches.
#[allow(clippy::too_many_arguments)]
pub fn r3f_objective(
    g: &mut Graph,
    encoder: &EncoderParams,
    head: &HeadParams,
    vars: &ModelVars,
    tokens: &[&[u32]],
    labels: &[usize],
    noise: &Tensor,
    cfg: &RegularizerConfig,
) -> Result<ObjectiveNodes> {
    check_labels(labels, tokens)?;
    g.begin_forward_pass();
    let clean = forward_logits(g, encoder, head, vars, tokens, None)?;
    g.begin_forward_pass();
    let z = g.constant(noise.clone());
    let noisy = forward_logits(g, encoder, head, vars, tokens, Some(z))?;
    let task = task_losses(g, clean, labels, cfg.label_smoothing_alpha)?;
    let reg = symmetric_kl_rows(g, clean, noisy)?;
    combine(g, task, reg, cfg.lambda)
}

fn combine(g: &mut Graph, task: NodeId, reg: NodeId, lambda: f64) -> Result<ObjectiveNodes> {
    let weighted = g.scale(reg, lambda)?;
    let per = g.add(task, weighted)?;
    Ok(ObjectiveNodes {
        total: g.mean(per)?,
        task: g.mean(task)?,
        reg: g.mean(reg)?,
    })
}

/// Mean of `task(clean) + lambda * KL_S(clean, f(x + delta))` with `delta`
/// held constant. Records one forward pass (the perturbed one); `clean` must
/// already be on the graph.
#[allow(clippy::too_many_arguments)]
pub fn smart_objective(
    g: &mut Graph,
    encoder: &EncoderParams,
    head: &HeadParams,
    vars: &ModelVars,
    tokens: &[&[u32]],
    labels: &[usize],
    clean: NodeId,
    delta: &Tensor,
    cfg: &RegularizerConfig,
) -> Result<ObjectiveNodes> {
    check_labels(labels, tokens)?;
    g.begin_forward_pass();
    let d = g.constant(delta.clone());
    let adv = forward_logits(g, encoder, head, vars, tokens, Some(d))?;
    let task = task_losses(g, clean, labels, cfg.label_smoothing_alpha)?;
    let reg = symmetric_kl_rows(g, clean, adv)?;
    combine(g, task, reg, cfg.lambda)
}

/// Average task loss over a fixed perturbation trajectory, one forward pass
/// per iterate.
#[allow(clippy::too_many_arguments)]
pub fn freelb_objective(
    g: &mut Graph,
    encoder: &EncoderParams,
    head: &HeadParams,
    vars: &ModelVars,
    tokens: &[&[u32]],
    labels: &[usize],
    deltas: &[Tensor],
    cfg: &RegularizerConfig,
) -> Result<ObjectiveNodes> {
    check_labels(labels, tokens)?;
    if deltas.is_empty() {
        return Err(Error::InvalidInput("empty perturbation trajectory".into()));
    }
    let w = 1.0 / deltas.len() as f64;
    let mut total: Option<NodeId> = None;
    for delta in deltas {
        g.begin_forward_pass();
        let d = g.constant(delta.clone());
        let logits = forward_logits(g, encoder, head, vars, tokens, Some(d))?;
        let per = task_losses(g, logits, labels, cfg.label_smoothing_alpha)?;
        let mean = g.mean(per)?;
        let term = g.scale(mean, w)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty");
    let reg = g.constant(Tensor::scalar(0.0));
    Ok(ObjectiveNodes { total, task: total, reg })
}

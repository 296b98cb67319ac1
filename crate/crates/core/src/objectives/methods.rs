//! One optimizer step's loss and gradients for every method, with exact
//! forward/backward accounting.

use serde::{Deserialize, Serialize};

use super::graph_losses::{
    forward_logits, r3f_objective, register_model, smart_objective, symmetric_kl_rows, task_losses, ModelVars,
    ObjectiveNodes,
};
use super::noise::sample_noise;
use super::{BallNorm, Method, RegularizerConfig};
use crate::autodiff::{Graph, NodeId, PassCounters};
use crate::error::{Error, Result};
use crate::model::{EncoderParams, HeadParams};
use crate::rng::StreamRng;
use crate::tasks::Example;
use crate::tensor::Tensor;

/// Equal-length token sequences and their labels.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub tokens: Vec<&'a [u32]>,
    pub labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn from_examples(examples: &[&'a Example]) -> Self {
        Self {
            tokens: examples.iter().map(|e| e.tokens.as_slice()).collect(),
            labels: examples.iter().map(|e| e.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub task_term: f64,
    pub reg_term: f64,
    pub fp_used: u64,
    pub bp_used: u64,
}

/// Loss report plus gradients for every parameter tensor (encoder tensors,
/// then head tensors).
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: LossReport,
    pub grads: Vec<Vec<f64>>,
    pub counters: PassCounters,
}

fn finish(g: &mut Graph, vars: &ModelVars, nodes: ObjectiveNodes) -> Result<StepOutput> {
    let ids = vars.ids();
    g.backward(nodes.total)?;
    let grads = ids
        .iter()
        .map(|&id| g.grad(id).map_or_else(|| vec![0.0; g.value(id).numel()], <[f64]>::to_vec))
        .collect();
    Ok(output(g, nodes, grads))
}

fn output(g: &Graph, nodes: ObjectiveNodes, grads: Vec<Vec<f64>>) -> StepOutput {
    let item = |id: NodeId| g.value(id).values()[0];
    let counters = g.counters();
    StepOutput {
        report: LossReport {
            total: item(nodes.total),
            task_term: item(nodes.task),
            reg_term: item(nodes.reg),
            fp_used: counters.forward,
            bp_used: counters.backward,
        },
        grads,
        counters,
    }
}

fn check_batch(batch: &Batch<'_>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(())
}

/// Plain task loss: one forward, one backward.
pub fn standard_loss(
    encoder: &EncoderParams,
    head: &HeadParams,
    batch: &Batch<'_>,
    cfg: &RegularizerConfig,
) -> Result<StepOutput> {
    check_batch(batch)?;
    let mut g = Graph::new();
    let vars = register_model(&mut g, encoder, head, true);
    g.begin_forward_pass();
    let logits = forward_logits(&mut g, encoder, head, &vars, &batch.tokens, None)?;
    let task = task_losses(&mut g, logits, &batch.labels, cfg.label_smoothing_alpha)?;
    let total = g.mean(task)?;
    let reg = g.constant(Tensor::scalar(0.0));
    finish(&mut g, &vars, ObjectiveNodes { total, task: total, reg })
}

/// Noise-smoothness objective: fresh noise for every example, two forward
/// passes, one backward.
pub fn r3f_loss(
    encoder: &EncoderParams,
    head: &HeadParams,
    batch: &Batch<'_>,
    cfg: &RegularizerConfig,
    rng: &mut StreamRng,
) -> Result<StepOutput> {
    check_batch(batch)?;
    if cfg.method == Method::R4f && !head.spectral_enabled {
        return Err(Error::Config("r4f needs a spectrally normalized head".into()));
    }
    let rows = batch.len() * batch.seq_len();
    let noise = sample_noise(rows, encoder.config.dim, cfg, rng);
    let mut g = Graph::new();
    let vars = register_model(&mut g, encoder, head, true);
    let nodes = r3f_objective(&mut g, encoder, head, &vars, &batch.tokens, &batch.labels, &noise, cfg)?;
    finish(&mut g, &vars, nodes)
}

/// Projects each example's `[m, n]` block of `delta` onto the ball of radius
/// `epsilon * sqrt(m n)` (L2) or onto `[-epsilon, epsilon]` entrywise (Linf).
pub fn project(delta: &mut [f64], block: usize, epsilon: f64, norm: BallNorm) {
    match norm {
        BallNorm::L2 => {
            let radius = epsilon * (block as f64).sqrt();
            for chunk in delta.chunks_mut(block) {
                let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > radius {
                    let s = radius / n;
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        BallNorm::Linf => delta.iter_mut().for_each(|v| *v = v.clamp(-epsilon, epsilon)),
    }
}

/// Adds `eta` times the per-example normalized gradient (unit L2 norm, or its
/// sign for Linf), then projects.
fn ascent_update(delta: &mut [f64], grad: &[f64], block: usize, cfg: &RegularizerConfig) {
    for (d, gr) in delta.chunks_mut(block).zip(grad.chunks(block)) {
        match cfg.ball_norm {
            BallNorm::L2 => {
                let n = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    d.iter_mut().zip(gr).for_each(|(x, gv)| *x += cfg.ascent_lr * gv / n);
                }
            }
            BallNorm::Linf => d
                .iter_mut()
                .zip(gr)
                .for_each(|(x, gv)| *x += cfg.ascent_lr * if *gv == 0.0 { 0.0 } else { gv.signum() }),
        }
    }
    project(delta, block, cfg.epsilon, cfg.ball_norm);
}

fn initial_delta(batch: &Batch<'_>, encoder: &EncoderParams, cfg: &RegularizerConfig, rng: &mut StreamRng) -> Tensor {
    let block = batch.seq_len() * encoder.config.dim;
    let mut d = sample_noise(batch.len() * batch.seq_len(), encoder.config.dim, cfg, rng);
    project(d.values_mut(), block, cfg.epsilon, cfg.ball_norm);
    d
}

fn check_adversarial(cfg: &RegularizerConfig) -> Result<()> {
    if cfg.ascent_steps == 0 {
        return Err(Error::Config("ascent_steps must be >= 1".into()));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Config("epsilon must be > 0".into()));
    }
    Ok(())
}

struct SmartState {
    graph: Graph,
    vars: ModelVars,
    clean: NodeId,
    delta: Tensor,
}

/// The first forward evaluates `[x; x + delta_0]` as one stacked batch, so the
/// clean scores and the first ascent point share a pass. Each further ascent
/// step costs one forward; each ascent step costs one backward.
fn smart_ascent(
    encoder: &EncoderParams,
    head: &HeadParams,
    batch: &Batch<'_>,
    cfg: &RegularizerConfig,
    rng: &mut StreamRng,
) -> Result<SmartState> {
    check_batch(batch)?;
    check_adversarial(cfg)?;
    let (b, m, n) = (batch.len(), batch.seq_len(), encoder.config.dim);
    let block = m * n;
    let mut delta = initial_delta(batch, encoder, cfg, rng);

    let mut g = Graph::new();
    let vars = register_model(&mut g, encoder, head, true);
    g.begin_forward_pass();
    let mut stacked_tokens = batch.tokens.clone();
    stacked_tokens.extend(batch.tokens.iter().copied());
    let mut stacked = vec![0.0; b * block];
    stacked.extend_from_slice(delta.values());
    let pert = g.param(Tensor::matrix(2 * b * m, n, stacked)?);
    let both = forward_logits(&mut g, encoder, head, &vars, &stacked_tokens, Some(pert))?;
    let clean = g.slice_rows(both, 0, b)?;
    let first_adv = g.slice_rows(both, b, b)?;
    let target = g.detach(clean);

    for step in 0..cfg.ascent_steps {
        let (leaf, adv) = if step == 0 {
            (pert, first_adv)
        } else {
            g.begin_forward_pass();
            let leaf = g.param(delta.clone());
            (leaf, forward_logits(&mut g, encoder, head, &vars, &batch.tokens, Some(leaf))?)
        };
        let kl = symmetric_kl_rows(&mut g, target, adv)?;
        let obj = g.mean(kl)?;
        let mut grad = g.gradients_wrt(obj, &[leaf])?.pop().expect("one leaf");
        if step == 0 {
            grad.drain(..b * block);
        }
        ascent_update(delta.values_mut(), &grad, block, cfg);
    }
    Ok(SmartState {
        graph: g,
        vars,
        clean,
        delta,
    })
}

/// The perturbation `delta*` found by the inner ascent, `[b*m, n]`.
pub fn smart_inner_ascent(
    encoder: &EncoderParams,
    head: &HeadParams,
    batch: &Batch<'_>,
    cfg: &RegularizerConfig,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    Ok(smart_ascent(encoder, head, batch, cfg, rng)?.delta)
}

/// Task loss plus `lambda * KL_S` at the ascended perturbation (held
/// constant): `1 + S` forward and `1 + S` backward passes.
pub fn smart_loss(
    encoder: &EncoderParams,
    head: &HeadParams,
    batch: &Batch<'_>,
    cfg: &RegularizerConfig,
    rng: &mut StreamRng,
) -> Result<StepOutput> {
    let SmartState {
        mut graph,
        vars,
        clean,
        delta,
    } = smart_ascent(encoder, head, batch, cfg, rng)?;
    let nodes = smart_objective(
        &mut graph,
        encoder,
        head,
        &vars,
        &batch.tokens,
        &batch.labels,
        clean,
        &delta,
        cfg,
    )?;
    finish(&mut graph, &vars, nodes)
}

struct FreelbRun {
    deltas: Vec<Tensor>,
    output: StepOutput,
}

fn freelb_run(
    encoder: &EncoderParams,
    head: &HeadParams,
    batch: &Batch<'_>,
    cfg: &RegularizerConfig,
    rng: &mut StreamRng,
) -> Result<FreelbRun> {
    check_batch(batch)?;
    check_adversarial(cfg)?;
    let block = batch.seq_len() * encoder.config.dim;
    let mut delta = initial_delta(batch, encoder, cfg, rng);
    let iterates = cfg.ascent_steps + 1;
    let w = 1.0 / iterates as f64;

    let mut g = Graph::new();
    let vars = register_model(&mut g, encoder, head, true);
    let mut deltas = Vec::with_capacity(iterates);
    let mut total: Option<NodeId> = None;
    for k in 0..iterates {
        g.begin_forward_pass();
        let leaf = g.param(delta.clone());
        let logits = forward_logits(&mut g, encoder, head, &vars, &batch.tokens, Some(leaf))?;
        let per = task_losses(&mut g, logits, &batch.labels, cfg.label_smoothing_alpha)?;
        let mean = g.mean(per)?;
        let term = g.scale(mean, w)?;
        g.backward(term)?;
        deltas.push(delta.clone());
        if k + 1 < iterates {
            let grad = g.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; delta.numel()]);
            ascent_update(delta.values_mut(), &grad, block, cfg);
        }
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("at least one iterate");
    let reg = g.constant(Tensor::scalar(0.0));
    let ids = vars.ids();
    let grads = ids
        .iter()
        .map(|&id| g.grad(id).map_or_else(|| vec![0.0; g.value(id).numel()], <[f64]>::to_vec))
        .collect();
    let output = output(&g, ObjectiveNodes { total, task: total, reg }, grads);
    Ok(FreelbRun { deltas, output })
}

/// Perturbation iterates `delta_0 ..= delta_S` visited by the adversarial
/// task-loss ascent.
pub fn freelb_trajectory(
    encoder: &EncoderParams,
    head: &HeadParams,
    batch: &Batch<'_>,
    cfg: &RegularizerConfig,
    rng: &mut StreamRng,
) -> Result<Vec<Tensor>> {
    Ok(freelb_run(encoder, head, batch, cfg, rng)?.deltas)
}

/// Task loss averaged over the ascent iterates, with parameter gradients
/// accumulated across them: `1 + S` forward and `1 + S` backward passes.
pub fn freelb_loss(
    encoder: &EncoderParams,
    head: &HeadParams,
    batch: &Batch<'_>,
    cfg: &RegularizerConfig,
    rng: &mut StreamRng,
) -> Result<StepOutput> {
    Ok(freelb_run(encoder, head, batch, cfg, rng)?.output)
}

/// Loss and gradients of one step of the configured method.
pub fn training_step(
    encoder: &EncoderParams,
    head: &HeadParams,
    batch: &Batch<'_>,
    cfg: &RegularizerConfig,
    rng: &mut StreamRng,
) -> Result<StepOutput> {
    match cfg.method {
        Method::Standard | Method::StandardPp => standard_loss(encoder, head, batch, cfg),
        Method::R3f | Method::R4f => r3f_loss(encoder, head, batch, cfg, rng),
        Method::Smart => smart_loss(encoder, head, batch, cfg, rng),
        Method::Freelb => freelb_loss(encoder, head, batch, cfg, rng),
    }
}

//! Masked-token pretraining with a tied output softmax.
//!
//! Masked positions get the dedicated MASK row of the embedding table; the
//! final hidden state at each masked position is scored against every
//! embedding row (`H E^T`) and trained to recover the original id.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{embed, run_blocks, EncoderParams};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::optim::{lr_at, AdamConfig, AdamState, Schedule};
use crate::rng::{named_stream, stream, Stream, StreamRng};
use crate::tasks::MASK;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub mask_rate: f64,
    pub steps: usize,
    pub corpus_size: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            steps: 800,
            corpus_size: 4000,
            batch_size: 32,
            peak_lr: 3e-3,
            warmup_fraction: 0.06,
            weight_decay: 0.01,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate {} outside (0, 1)", self.mask_rate)));
        }
        if self.corpus_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("corpus_size and batch_size must be positive".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr {} must be > 0", self.peak_lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: EncoderParams,
    /// Training loss of every step.
    pub losses: Vec<f64>,
}

/// Picks masked positions (never position 0, at least one per sequence).
fn mask_positions(rng: &mut StreamRng, len: usize, rate: f64) -> Vec<usize> {
    let mut pos: Vec<usize> = (1..len).filter(|_| rng.random_bool(rate)).collect();
    if pos.is_empty() {
        pos.push(rng.random_range(1..len));
    }
    pos
}

/// Masked-token loss and argmax hits for one batch. Returns
/// `(graph, loss node, trainable ids, hits, masked count)`.
fn masked_batch(
    params: &EncoderParams,
    seqs: &[&Vec<u32>],
    rng: &mut StreamRng,
    rate: f64,
    trainable: bool,
) -> Result<(Graph, crate::autodiff::NodeId, Vec<crate::autodiff::NodeId>, usize, usize)> {
    let m = seqs[0].len();
    let mut inputs: Vec<Vec<u32>> = Vec::with_capacity(seqs.len());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, s) in seqs.iter().enumerate() {
        let mut s = (*s).clone();
        for p in mask_positions(rng, m, rate) {
            rows.push(b * m + p);
            targets.push(s[p] as usize);
            s[p] = MASK;
        }
        inputs.push(s);
    }
    let mut g = Graph::new();
    g.begin_forward_pass();
    let vars = params.register(&mut g, trainable);
    let batch: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
    let (x, m) = embed(&mut g, &vars, &params.config, &batch, None)?;
    let h = run_blocks(&mut g, &vars, &params.config, x, m)?;
    let hm = g.gather_rows(h, &rows)?;
    let et = g.transpose(vars.embedding)?;
    let logits = g.matmul(hm, et)?;
    let logp = g.log_softmax(logits)?;
    let picked = g.pick_cols(logp, &targets)?;
    let mean = g.mean(picked)?;
    let loss = g.scale(mean, -1.0)?;
    let lv = g.value(logits);
    let hits = targets
        .iter()
        .enumerate()
        .filter(|(i, &t)| {
            let row = lv.row(*i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == t
        })
        .count();
    Ok((g, loss, vars.ids(), hits, targets.len()))
}

/// Trains `params` on `corpus` for `cfg.steps` updates. Batches and masks
/// come from the data-order stream of `seed`.
pub fn pretrain(params: &EncoderParams, cfg: &PretrainConfig, corpus: &[Vec<u32>], seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("pretraining corpus is empty".into()));
    }
    let mut params = params.clone();
    if cfg.steps == 0 {
        return Ok(PretrainOutcome {
            params,
            losses: Vec::new(),
        });
    }
    let mut rng = stream(seed, Stream::DataOrder);
    let schedule = Schedule::polynomial(cfg.peak_lr, cfg.steps as u64, cfg.warmup_fraction);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = AdamState::new(
        &sizes,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            bias_correction: true,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let seqs: Vec<&Vec<u32>> = idx.iter().map(|&i| &corpus[i]).collect();
        let (mut g, loss, ids, _, _) = masked_batch(&params, &seqs, &mut rng, cfg.mask_rate, true)?;
        losses.push(g.value(loss).values()[0]);
        let grads = g.gradients_wrt(loss, &ids)?;
        let lr = lr_at(&schedule, step as u64)?;
        adam.step(&mut params.tensors_mut(), &grads, &names, lr)?;
    }
    Ok(PretrainOutcome { params, losses })
}

/// Fraction of masked positions whose original id is the top-scoring row,
/// over `corpus` with masks drawn from a fixed evaluation stream.
pub fn masked_accuracy(params: &EncoderParams, corpus: &[Vec<u32>], mask_rate: f64, seed: u64) -> Result<f64> {
    let mut rng = named_stream(seed, "masked-eval");
    let (mut hits, mut total) = (0, 0);
    let seqs: Vec<&Vec<u32>> = corpus.iter().collect();
    for chunk in seqs.chunks(64) {
        let (_, _, _, h, n) = masked_batch(params, chunk, &mut rng, mask_rate, false)?;
        hits += h;
        total += n;
    }
    Ok(hits as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::tasks::generate_corpus;

    #[test]
    fn zero_steps_is_noop_and_bad_rate_rejected() {
        let p = EncoderParams::init(EncoderConfig::default(), &mut stream(1, Stream::Init)).unwrap();
        let corpus = generate_corpus(64, 16, 8, 1).unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        assert_eq!(pretrain(&p, &cfg, &corpus, 1).unwrap().params, p);
        let bad = PretrainConfig {
            mask_rate: 1.0,
            ..cfg
        };
        assert!(matches!(pretrain(&p, &bad, &corpus, 1), Err(Error::Config(_))));
    }

    #[test]
    fn short_run_is_deterministic() {
        let p = EncoderParams::init(EncoderConfig::default(), &mut stream(1, Stream::Init)).unwrap();
        let corpus = generate_corpus(64, 16, 64, 1).unwrap();
        let cfg = PretrainConfig {
            steps: 3,
            batch_size: 8,
            ..PretrainConfig::default()
        };
        let a = pretrain(&p, &cfg, &corpus, 9).unwrap();
        let b = pretrain(&p, &cfg, &corpus, 9).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.losses.len(), 3);
    }
}

//! Representational-collapse measurements: linear probes on frozen encoder
//! features, the probe matrix after source fine-tuning, sequential
//! degradation chains and cyclic retention chains.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::PassCounters;
use crate::error::{Error, Result};
use crate::model::{encode_many, EncoderParams, HeadConfig, HeadParams};
use crate::objectives::{fine_tune, Method, RegularizerConfig, RunStatus, TrainConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, named_stream, stream, Stream};
use crate::runner::run_seeds;
use crate::tasks::{Example, TaskData};
use crate::tensor::Tensor;

/// Method label of the unfine-tuned baseline column.
pub const BASELINE: &str = "none";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplier on the `1/sqrt(n)` standard deviation of the probe init.
    pub init_scale: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 20,
            batch_size: 32,
            init_scale: 1.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.init_scale >= 0.0) {
            return Err(Error::Config(format!(
                "probe lr {} must be > 0 and init_scale {} >= 0",
                self.lr, self.init_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe_task: String,
    pub accuracy: f64,
    pub encoder_fingerprint: String,
    pub probe_epochs: usize,
}

fn features(encoder: &EncoderParams, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    encode_many(encoder, &seqs, 250)
}

fn predict(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let q = b.numel();
    let mut s = b.values().to_vec();
    for (i, xi) in x.iter().enumerate() {
        let row = &w.values()[i * q..(i + 1) * q];
        s.iter_mut().zip(row).for_each(|(o, wv)| *o += xi * wv);
    }
    s
}

fn argmax(s: &[f64]) -> usize {
    (0..s.len()).fold(0, |b, j| if s[j] > s[b] { j } else { b })
}

/// Trains a fresh linear softmax layer on frozen features of `encoder` and
/// returns the best dev accuracy over the probe epochs. The encoder is
/// fingerprinted before and after; a mismatch is an invariant violation.
pub fn probe(encoder: &EncoderParams, task: &TaskData, cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    cfg.validate()?;
    if task.train.examples.is_empty() || task.dev.examples.is_empty() {
        return Err(Error::InvalidInput(format!("task {} has an empty split", task.spec.name)));
    }
    let before = encoder.fingerprint();
    let train_x = features(encoder, &task.train.examples)?;
    let dev_x = features(encoder, &task.dev.examples)?;
    if train_x.iter().chain(&dev_x).flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("probe", "non-finite encoder features"));
    }
    let (n, q) = (encoder.config.dim, task.classes());

    let mut init = stream(seed, Stream::ProbeInit);
    let dist = Normal::new(0.0, cfg.init_scale / (n as f64).sqrt()).expect("validated scale");
    let mut w = Tensor::matrix(n, q, (0..n * q).map(|_| dist.sample(&mut init)).collect())?;
    let mut b = Tensor::zeros(&[q]);
    let adam_cfg = AdamConfig {
        weight_decay: 0.0,
        bias_correction: true,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&[n * q, q], adam_cfg);
    let names = ["probe.weight".to_string(), "probe.bias".to_string()];
    let mut order_rng = named_stream(seed, "probe-order");
    let mut order: Vec<usize> = (0..train_x.len()).collect();

    let mut best = f64::NEG_INFINITY;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for idx in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; n * q];
            let mut gb = vec![0.0; q];
            let scale = 1.0 / idx.len() as f64;
            for &i in idx {
                let x = &train_x[i];
                let mut p = predict(&w, &b, x);
                crate::autodiff::softmax_in_place(&mut p);
                p[task.train.examples[i].label] -= 1.0;
                for (r, xr) in x.iter().enumerate() {
                    for (c, pc) in p.iter().enumerate() {
                        gw[r * q + c] += scale * xr * pc;
                    }
                }
                gb.iter_mut().zip(&p).for_each(|(g, pc)| *g += scale * pc);
            }
            adam.step(&mut [&mut w, &mut b], &[gw, gb], &names, cfg.lr)?;
        }
        let correct = dev_x
            .iter()
            .zip(&task.dev.examples)
            .filter(|(x, e)| argmax(&predict(&w, &b, x)) == e.label)
            .count();
        best = best.max(correct as f64 / dev_x.len() as f64);
    }

    let after = encoder.fingerprint();
    if after != before {
        return Err(Error::Invariant(format!(
            "encoder changed during probing of {}: {before} -> {after}",
            task.spec.name
        )));
    }
    Ok(ProbeResult {
        probe_task: task.spec.name.clone(),
        accuracy: best,
        encoder_fingerprint: after,
        probe_epochs: cfg.epochs,
    })
}

/// Everything a collapse experiment needs besides tasks and seeds. One
/// configuration is used for every stage of a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub regularizer: RegularizerConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub head_layers: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            regularizer: RegularizerConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            head_layers: 2,
        }
    }
}

impl Protocol {
    fn regularizer_for(&self, method: Method) -> RegularizerConfig {
        RegularizerConfig {
            method,
            ..self.regularizer.clone()
        }
    }

    /// Fine-tunes `encoder` on `task` with a fresh head seeded by `seed`.
    fn stage(&self, encoder: &EncoderParams, task: &TaskData, method: Method, seed: u64) -> Result<StageOutcome> {
        let head_cfg = HeadConfig {
            layers: self.head_layers,
            spectral: method.spectral_head(),
            ..HeadConfig::new(encoder.config.dim, task.classes())
        };
        let head = HeadParams::init(&head_cfg, &mut stream(seed, Stream::Init))?;
        let out = fine_tune(encoder, &head, task, &self.regularizer_for(method), &self.train, seed)?;
        Ok(StageOutcome {
            encoder: out.best.encoder,
            dev_accuracy: out.best_dev_accuracy,
            status: out.status,
            counters: out.counters,
        })
    }
}

struct StageOutcome {
    encoder: EncoderParams,
    dev_accuracy: f64,
    status: RunStatus,
    counters: PassCounters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub method: String,
    pub seed: u64,
    pub probe_task: String,
    /// `None` when the source fine-tune failed.
    pub accuracy: Option<f64>,
    pub source_dev_accuracy: Option<f64>,
}

/// One source fine-tune of the probe matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRun {
    pub method: Method,
    pub seed: u64,
    pub status: RunStatus,
    pub counters: PassCounters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMatrix {
    pub cells: Vec<MatrixCell>,
    pub runs: Vec<MatrixRun>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

impl ProbeMatrix {
    /// Median over seeds of successful cells for each (method, probe task).
    pub fn medians(&self) -> BTreeMap<(String, String), f64> {
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for c in &self.cells {
            if let Some(a) = c.accuracy {
                groups.entry((c.method.clone(), c.probe_task.clone())).or_default().push(a);
            }
        }
        groups.into_iter().filter_map(|(k, v)| median(v).map(|m| (k, m))).collect()
    }
}

/// Fine-tunes on `source` with every method and seed, then probes each of
/// `probe_tasks` on the frozen result. The unfine-tuned encoder is probed too
/// under the method label [`BASELINE`].
pub fn generalization_probe_matrix(
    pretrained: &EncoderParams,
    source: &TaskData,
    probe_tasks: &[TaskData],
    methods: &[Method],
    seeds: &[u64],
    protocol: &Protocol,
    jobs: usize,
) -> Result<ProbeMatrix> {
    let per_seed = run_seeds(seeds, jobs, |seed| {
        let mut cells = Vec::new();
        let mut runs = Vec::new();
        let probe_all = |encoder: &EncoderParams, label: &str, dev: Option<f64>, cells: &mut Vec<MatrixCell>| {
            for (j, t) in probe_tasks.iter().enumerate() {
                let r = probe(encoder, t, &protocol.probe, derive_seed(seed, &format!("probe{j}")))?;
                cells.push(MatrixCell {
                    method: label.to_string(),
                    seed,
                    probe_task: t.spec.name.clone(),
                    accuracy: Some(r.accuracy),
                    source_dev_accuracy: dev,
                });
            }
            Ok::<_, Error>(())
        };
        probe_all(pretrained, BASELINE, None, &mut cells)?;
        for &method in methods {
            let out = protocol.stage(pretrained, source, method, seed)?;
            runs.push(MatrixRun {
                method,
                seed,
                status: out.status.clone(),
                counters: out.counters,
            });
            if out.status.is_ok() {
                probe_all(&out.encoder, method.as_str(), Some(out.dev_accuracy), &mut cells)?;
            } else {
                cells.extend(probe_tasks.iter().map(|t| MatrixCell {
                    method: method.as_str().to_string(),
                    seed,
                    probe_task: t.spec.name.clone(),
                    accuracy: None,
                    source_dev_accuracy: None,
                }));
            }
        }
        Ok((cells, runs))
    })?;
    let (cells, runs): (Vec<_>, Vec<_>) = per_seed.into_iter().unzip();
    Ok(ProbeMatrix {
        cells: cells.into_iter().flatten().collect(),
        runs: runs.into_iter().flatten().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainStage {
    pub stage_index: usize,
    pub stage_task: String,
    /// 1-based cycle of the probe; 1 for sequential chains.
    pub cycle: usize,
    pub stage_dev_accuracy: f64,
    pub probe: ProbeResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub method: Method,
    pub seed: u64,
    pub stages: Vec<ChainStage>,
    pub status: RunStatus,
    pub counters: PassCounters,
}

impl ChainResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.probe.accuracy).collect()
    }
}

/// Fine-tunes `source`, then each task of `chain` in order starting from the
/// previous stage's best checkpoint, probing `source` after every stage.
/// A failed stage ends the chain with the stages completed so far.
pub fn sequential_degradation(
    pretrained: &EncoderParams,
    source: &TaskData,
    chain: &[TaskData],
    method: Method,
    seed: u64,
    protocol: &Protocol,
) -> Result<ChainResult> {
    let mut encoder = pretrained.clone();
    let mut counters = PassCounters::default();
    let mut stages = Vec::with_capacity(chain.len() + 1);
    for (k, task) in std::iter::once(source).chain(chain).enumerate() {
        let out = protocol.stage(&encoder, task, method, derive_seed(seed, &format!("stage{k}")))?;
        counters += out.counters;
        if !out.status.is_ok() {
            return Ok(ChainResult {
                method,
                seed,
                stages,
                status: out.status,
                counters,
            });
        }
        encoder = out.encoder;
        let p = probe(&encoder, source, &protocol.probe, derive_seed(seed, &format!("probe{k}")))?;
        stages.push(ChainStage {
            stage_index: k,
            stage_task: task.spec.name.clone(),
            cycle: 1,
            stage_dev_accuracy: out.dev_accuracy,
            probe: p,
        });
    }
    Ok(ChainResult {
        method,
        seed,
        stages,
        status: RunStatus::Ok,
        counters,
    })
}

/// Walks `tasks` cyclically `cycles` times: stage `k` fine-tunes
/// `tasks[k % len]` from the previous best checkpoint and probes the next
/// task in the cycle, so every task is probed once per cycle.
pub fn cyclic_retention(
    pretrained: &EncoderParams,
    tasks: &[TaskData],
    cycles: usize,
    method: Method,
    seed: u64,
    protocol: &Protocol,
) -> Result<ChainResult> {
    if cycles < 2 {
        return Err(Error::Config(format!("cyclic retention needs >= 2 cycles, got {cycles}")));
    }
    if tasks.len() < 2 {
        return Err(Error::Config("a task cycle needs >= 2 tasks".into()));
    }
    let len = tasks.len();
    let mut encoder = pretrained.clone();
    let mut counters = PassCounters::default();
    let mut stages = Vec::with_capacity(len * cycles);
    for k in 0..len * cycles {
        let task = &tasks[k % len];
        let out = protocol.stage(&encoder, task, method, derive_seed(seed, &format!("stage{k}")))?;
        counters += out.counters;
        if !out.status.is_ok() {
            return Ok(ChainResult {
                method,
                seed,
                stages,
                status: out.status,
                counters,
            });
        }
        encoder = out.encoder;
        let target = &tasks[(k + 1) % len];
        let p = probe(&encoder, target, &protocol.probe, derive_seed(seed, &format!("probe{k}")))?;
        stages.push(ChainStage {
            stage_index: k,
            stage_task: task.spec.name.clone(),
            cycle: k / len + 1,
            stage_dev_accuracy: out.dev_accuracy,
            probe: p,
        });
    }
    Ok(ChainResult {
        method,
        seed,
        stages,
        status: RunStatus::Ok,
        counters,
    })
}

/// Mean over the cycle's tasks of the probe accuracy recorded in `cycle`.
pub fn cycle_mean(result: &ChainResult, cycle: usize) -> Option<f64> {
    let v: Vec<f64> = result
        .stages
        .iter()
        .filter(|s| s.cycle == cycle)
        .map(|s| s.probe.accuracy)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median_of(values: &[f64]) -> Option<f64> {
    median(values.to_vec())
}

//! Fine-tuning loop: shuffled epochs from the data-order stream, per-step
//! objective from the configured method, Adam with the polynomial schedule,
//! dev evaluation after every epoch and best-checkpoint retention.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::methods::{training_step, Batch};
use super::{Method, RegularizerConfig};
use crate::autodiff::{Graph, PassCounters};
use crate::error::{Error, Result};
use crate::model::{encode_batch, head_logits, EncoderParams, HeadParams, TRAIN_SPECTRAL_ITERS};
use crate::optim::{clip_gradients, lr_at, AdamConfig, AdamState, Schedule};
use crate::rng::{stream, Stream};
use crate::tasks::{Example, TaskData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub max_updates: u64,
    pub warmup_fraction: f64,
    pub power: f64,
    pub end_lr: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    /// Update-budget multiplier applied for `standard_pp`.
    pub pp_update_factor: f64,
    /// Record a parameter fingerprint after every update.
    pub record_trajectory: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            max_updates: 2000,
            warmup_fraction: 0.06,
            power: 1.0,
            end_lr: 0.0,
            batch_size: 32,
            adam: AdamConfig::default(),
            clip_norm: None,
            pp_update_factor: 2.0,
            record_trajectory: false,
        }
    }
}

impl TrainConfig {
    /// The configuration actually used for `method`: `standard_pp` turns on
    /// Adam bias correction and scales the update budget; nothing else changes.
    pub fn for_method(&self, method: Method) -> Self {
        let mut c = self.clone();
        if method == Method::StandardPp {
            c.adam.bias_correction = true;
            c.max_updates = (self.max_updates as f64 * self.pp_update_factor).round() as u64;
        }
        c
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.peak_lr,
            warmup_updates: (self.warmup_fraction * self.max_updates as f64).round() as u64,
            total_updates: self.max_updates,
            power: self.power,
            end_lr: self.end_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be > 0")));
            }
        }
        if !(self.pp_update_factor >= 1.0) {
            return Err(Error::Config(format!("pp_update_factor {} must be >= 1", self.pp_update_factor)));
        }
        if self.max_updates > 0 {
            self.schedule().validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

impl Model {
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder.fingerprint().as_bytes());
        for (name, t) in self.head.named_tensors() {
            h.update(name.as_bytes());
            for v in t.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed { step: u64, reason: String },
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub updates: u64,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub best_dev_accuracy: f64,
    /// Pass totals at the end of the epoch.
    pub fp_total: u64,
    pub bp_total: u64,
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub status: RunStatus,
    /// Parameters at the best dev accuracy (earliest on ties); the starting
    /// model when no epoch finished.
    pub best: Model,
    pub best_dev_accuracy: f64,
    pub best_update: u64,
    pub history: Vec<EpochRecord>,
    pub counters: PassCounters,
    pub updates: u64,
    pub trajectory: Vec<String>,
}

/// Argmax accuracy on `examples`, with spectral estimates refined on a copy.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty split".into()));
    }
    let head = model.head.eval_copy()?;
    let mut correct = 0usize;
    for chunk in examples.chunks(250) {
        let tokens: Vec<&[u32]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let mut g = Graph::new();
        g.begin_forward_pass();
        let ev = model.encoder.register(&mut g, false);
        let hv = head.register(&mut g, false);
        let r = encode_batch(&mut g, &ev, &model.encoder.config, &tokens, None)?;
        let logits = head_logits(&mut g, &head, &hv, r)?;
        let v = g.value(logits);
        for (i, e) in chunk.iter().enumerate() {
            let row = v.row(i);
            let pred = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(pred == e.label);
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Numeric { .. } | Error::InfiniteDivergence(_))
}

/// Fine-tunes `encoder` + `head` on `task`. Shuffling uses the data-order
/// stream of `seed` and perturbations the noise stream, so switching the
/// method never changes which examples are visited.
pub fn fine_tune(
    encoder: &EncoderParams,
    head: &HeadParams,
    task: &TaskData,
    reg: &RegularizerConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<FineTuneOutcome> {
    reg.validate()?;
    train.validate()?;
    if reg.method.spectral_head() && !head.spectral_enabled {
        return Err(Error::Config("r4f needs a spectrally normalized head".into()));
    }
    if head.classes() != task.classes() {
        return Err(Error::Config(format!(
            "head has {} classes, task {} has {}",
            head.classes(),
            task.spec.name,
            task.classes()
        )));
    }
    if task.train.examples.is_empty() || task.dev.examples.is_empty() {
        return Err(Error::InvalidInput(format!("task {} has an empty split", task.spec.name)));
    }
    let cfg = train.for_method(reg.method);
    let schedule = cfg.schedule();
    let mut data_rng = stream(seed, Stream::DataOrder);
    let mut noise_rng = stream(seed, Stream::Noise);

    let mut model = Model {
        encoder: encoder.clone(),
        head: head.clone(),
    };
    let names: Vec<String> = model
        .encoder
        .named_tensors()
        .into_iter()
        .chain(model.head.named_tensors())
        .map(|(n, _)| n)
        .collect();
    let sizes: Vec<usize> = model
        .encoder
        .named_tensors()
        .into_iter()
        .chain(model.head.named_tensors())
        .map(|(_, t)| t.numel())
        .collect();
    let mut adam = AdamState::new(&sizes, cfg.adam.clone());

    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_update = 0;
    let mut history = Vec::new();
    let mut counters = PassCounters::default();
    let mut trajectory = Vec::new();
    let mut status = RunStatus::Ok;
    let mut update = 0u64;
    let mut epoch = 0usize;
    let n = task.train.examples.len();

    'outer: while update < cfg.max_updates {
        epoch += 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut data_rng);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            if update >= cfg.max_updates {
                break;
            }
            update += 1;
            let examples: Vec<&Example> = idx.iter().map(|&i| &task.train.examples[i]).collect();
            let batch = Batch::from_examples(&examples);
            let attempt = (|| -> Result<f64> {
                if model.head.spectral_enabled {
                    model.head.power_step(TRAIN_SPECTRAL_ITERS)?;
                }
                let mut out = training_step(&model.encoder, &model.head, &batch, reg, &mut noise_rng)?;
                counters += out.counters;
                if !out.report.total.is_finite() {
                    return Err(Error::numeric("fine_tune", "non-finite loss"));
                }
                if let Some(c) = cfg.clip_norm {
                    clip_gradients(&mut out.grads, c)?;
                }
                let lr = lr_at(&schedule, update)?;
                let mut params: Vec<_> = model.encoder.tensors_mut();
                params.extend(model.head.tensors_mut());
                adam.step(&mut params, &out.grads, &names, lr)?;
                Ok(out.report.total)
            })();
            match attempt {
                Ok(loss) => {
                    loss_sum += loss;
                    loss_count += 1;
                }
                Err(e) if is_divergence(&e) => {
                    status = RunStatus::Failed {
                        step: update,
                        reason: e.to_string(),
                    };
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
            if cfg.record_trajectory {
                trajectory.push(model.fingerprint());
            }
        }
        let dev_accuracy = match evaluate(&model, &task.dev.examples) {
            Ok(a) => a,
            Err(e) if is_divergence(&e) => {
                status = RunStatus::Failed {
                    step: update,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        if dev_accuracy > best_acc {
            best_acc = dev_accuracy;
            best = model.clone();
            best_update = update;
        }
        history.push(EpochRecord {
            epoch,
            updates: update,
            train_loss: loss_sum / loss_count.max(1) as f64,
            dev_accuracy,
            best_dev_accuracy: best_acc,
            fp_total: counters.forward,
            bp_total: counters.backward,
        });
    }
    if history.is_empty() {
        best_acc = if status.is_ok() { evaluate(&model, &task.dev.examples)? } else { f64::NAN };
    }
    Ok(FineTuneOutcome {
        status,
        best,
        best_dev_accuracy: best_acc,
        best_update,
        history,
        counters,
        updates: update,
        trajectory,
    })
}

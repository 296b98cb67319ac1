//! Commands behind the CLI. Each writes CSVs, SVGs and JSON manifests into an
//! output directory. CSVs depend only on the config (wall-clock columns stay 0
//! unless `run.record_wall_clock` is set), so reruns are byte-identical however
//! many seeds run concurrently.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::PassCounters;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{file_hash, model_checkpoint, pretrain, Checkpoint, EncoderParams, HeadConfig, HeadParams};
use crate::objectives::{fine_tune, FineTuneOutcome, Method, RunStatus};
use crate::probes::{
    cyclic_retention, generalization_probe_matrix, median_of, sequential_degradation, ChainResult, BASELINE,
};
use crate::rng::{stream, Stream};
use crate::runner::run_seeds;
use crate::svg;
use crate::tasks::{generate_corpus, generate_task, task_suite, TaskData};
use crate::theory::{gaussian_kl, lipschitz_bound_experiment, GaussianDensity};

pub const MANIFEST: &str = "manifest.json";

/// Column order of `finetune.csv` and `stability_runs.csv`.
pub const FINETUNE_COLUMNS: [&str; 12] = [
    "config_hash",
    "method",
    "task",
    "seed",
    "epoch",
    "dev_accuracy",
    "best_dev_accuracy",
    "fp_total",
    "bp_total",
    "xfp_total",
    "wall_seconds",
    "status",
];

/// Column order of chain, cycle and probe-matrix CSVs.
pub const COLLAPSE_COLUMNS: [&str; 8] = [
    "config_hash",
    "method",
    "stage_index",
    "stage_task",
    "probe_task",
    "cycle",
    "seed",
    "accuracy",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory, or as given for inputs.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub seeds: Vec<u64>,
    pub method: Option<String>,
    pub task: Option<String>,
    /// `ok` or `failed`.
    pub status: String,
    pub failure: Option<String>,
    pub failed_runs: usize,
    pub counters: PassCounters,
    pub xfp: u64,
    pub wall_seconds: f64,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    fn new(command: &str, config_hash: &str) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash.into(),
            seed: None,
            seeds: Vec::new(),
            method: None,
            task: None,
            status: "ok".into(),
            failure: None,
            failed_runs: 0,
            counters: PassCounters::default(),
            xfp: 0,
            wall_seconds: 0.0,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn with_status(mut self, status: &RunStatus) -> Self {
        if let RunStatus::Failed { step, reason } = status {
            self.status = "failed".into();
            self.failure = Some(format!("step {step}: {reason}"));
            self.failed_runs = 1;
        }
        self
    }

    fn with_counters(mut self, counters: PassCounters) -> Self {
        self.counters = counters;
        self.xfp = counters.xfp();
        self
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_file(&dir.join(MANIFEST))
    }

    /// Reads a manifest stored under another name, such as a per-seed one.
    pub fn load_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks that every listed artifact exists under `dir` with the recorded
    /// hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let path = dir.join(&a.path);
            let actual = file_hash(&path)?;
            if actual != a.sha256 {
                return Err(Error::Invariant(format!(
                    "{} hash {actual} differs from manifest {}",
                    path.display(),
                    a.sha256
                )));
            }
        }
        Ok(())
    }
}

/// Output directory that records every file it writes.
struct OutDir {
    root: PathBuf,
    written: Vec<Artifact>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<Artifact> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let a = Artifact {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        };
        self.written.push(a.clone());
        Ok(a)
    }

    /// Writes `manifest.json` listing every file written since creation.
    fn finish(mut self, mut manifest: Manifest) -> Result<Manifest> {
        manifest.artifacts = std::mem::take(&mut self.written);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let path = self.root.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Writes a manifest for a sub-run and returns it as an artifact of this
    /// directory.
    fn write_manifest(&mut self, rel: &str, manifest: &Manifest) -> Result<Artifact> {
        let text = serde_json::to_string_pretty(manifest)? + "\n";
        self.write(rel, text.as_bytes())
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

struct Clock {
    start: Option<Instant>,
}

impl Clock {
    fn start(enabled: bool) -> Self {
        Self {
            start: enabled.then(Instant::now),
        }
    }

    fn seconds(&self) -> f64 {
        self.start.map_or(0.0, |s| s.elapsed().as_secs_f64())
    }
}

/// Order statistics of a seed distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for n = 1.
    pub stdev: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    let median = median_of(values)?;
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stdev = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary {
        n,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        median,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        stdev,
    })
}

/// Pretrained encoder plus the checkpoint file it came from, if any.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub encoder: EncoderParams,
    path: Option<PathBuf>,
    reference: Option<Artifact>,
}

impl Pretrained {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != "encoder" {
            return Err(Error::Checkpoint(format!(
                "{} holds a '{}' checkpoint; expected an encoder",
                path.display(),
                ckpt.kind
            )));
        }
        Ok(Self {
            encoder: EncoderParams::from_checkpoint(&ckpt)?,
            path: Some(path.to_path_buf()),
            reference: Some(Artifact {
                path: path.display().to_string(),
                sha256: file_hash(path)?,
            }),
        })
    }

    pub fn in_memory(encoder: EncoderParams) -> Self {
        Self {
            encoder,
            path: None,
            reference: None,
        }
    }

    fn check_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        if self.encoder.config != cfg.model.encoder {
            return Err(Error::Config(format!(
                "pretrained encoder config {:?} differs from model.* {:?}",
                self.encoder.config, cfg.model.encoder
            )));
        }
        Ok(())
    }

    /// The checkpoint file must be untouched by any downstream command.
    fn verify_unchanged(&self) -> Result<()> {
        if let (Some(path), Some(r)) = (&self.path, &self.reference) {
            let now = file_hash(path)?;
            if now != r.sha256 {
                return Err(Error::Invariant(format!(
                    "pretrained checkpoint {} changed during the run",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    fn inputs(&self) -> Vec<Artifact> {
        self.reference.iter().cloned().collect()
    }
}

/// Generates the named suite tasks, in the order given.
pub fn suite_tasks(cfg: &ExperimentConfig, names: &[String]) -> Result<Vec<TaskData>> {
    let specs = task_suite(cfg.task.suite_seed, &cfg.task.suite)?;
    names
        .iter()
        .map(|name| {
            let spec = specs.iter().find(|s| &s.name == name).ok_or_else(|| {
                let known: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
                Error::Config(format!("unknown task '{name}'; suite tasks are {}", known.join(", ")))
            })?;
            generate_task(spec)
        })
        .collect()
}

fn config_json(cfg: &ExperimentConfig) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(cfg)? + "\n").into_bytes())
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let clock = Clock::start(cfg.run.record_wall_clock);
    let seed = cfg.run.pretrain_seed;
    let enc = &cfg.model.encoder;
    let corpus = generate_corpus(enc.vocab_size, enc.max_len, cfg.pretrain.corpus_size, seed)?;
    let init = EncoderParams::init(enc.clone(), &mut stream(seed, Stream::Init))?;
    let outcome = pretrain(&init, &cfg.pretrain, &corpus, seed)?;

    let mut dir = OutDir::create(out)?;
    dir.write("pretrained.ckpt", outcome.params.to_checkpoint().render().as_bytes())?;
    let rows: Vec<Vec<String>> = outcome
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![hash.clone(), (i + 1).to_string(), num(*l)])
        .collect();
    dir.write("pretrain_losses.csv", &csv_bytes(&["config_hash", "step", "loss"], &rows)?)?;
    dir.write("config.json", &config_json(cfg)?)?;
    let steps = outcome.losses.len() as u64;
    let mut m = Manifest::new("pretrain", &hash).with_counters(PassCounters::new(steps, steps));
    m.seed = Some(seed);
    m.seeds = vec![seed];
    m.wall_seconds = clock.seconds();
    dir.finish(m)
}

fn head_for(cfg: &ExperimentConfig, task: &TaskData, method: Method, seed: u64) -> Result<HeadParams> {
    let head_cfg = HeadConfig {
        layers: cfg.model.head_layers,
        spectral: method.spectral_head(),
        ..HeadConfig::new(cfg.model.encoder.dim, task.classes())
    };
    HeadParams::init(&head_cfg, &mut stream(seed, Stream::Init))
}

struct SeedRun {
    seed: u64,
    outcome: FineTuneOutcome,
    seconds: f64,
}

fn fine_tune_seeds(cfg: &ExperimentConfig, pre: &Pretrained, task: &TaskData, method: Method) -> Result<Vec<SeedRun>> {
    let reg = cfg.method.regularizer(method);
    run_seeds(&cfg.run.seeds, cfg.run.jobs, |seed| {
        let clock = Clock::start(cfg.run.record_wall_clock);
        let head = head_for(cfg, task, method, seed)?;
        let outcome = fine_tune(&pre.encoder, &head, task, &reg, &cfg.optim, seed)?;
        Ok(SeedRun {
            seed,
            outcome,
            seconds: clock.seconds(),
        })
    })
}

fn history_rows(hash: &str, method: Method, task: &str, run: &SeedRun) -> Vec<Vec<String>> {
    let status = if run.outcome.status.is_ok() { "ok" } else { "failed" };
    run.outcome
        .history
        .iter()
        .map(|h| {
            vec![
                hash.to_string(),
                method.to_string(),
                task.to_string(),
                run.seed.to_string(),
                h.epoch.to_string(),
                num(h.dev_accuracy),
                num(h.best_dev_accuracy),
                h.fp_total.to_string(),
                h.bp_total.to_string(),
                PassCounters::new(h.fp_total, h.bp_total).xfp().to_string(),
                num(run.seconds),
                status.to_string(),
            ]
        })
        .collect()
}

fn ok_bests(runs: &[SeedRun]) -> Vec<f64> {
    runs.iter()
        .filter(|r| r.outcome.status.is_ok())
        .map(|r| r.outcome.best_dev_accuracy)
        .collect()
}

/// Fine-tunes `task.name` with `method.name` once per seed. With a non-empty
/// `method.lambda_grid`, runs once per grid value in `lambda_<value>/`.
pub fn cmd_finetune(cfg: &ExperimentConfig, pre: &Pretrained, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    pre.check_config(cfg)?;
    if !cfg.method.lambda_grid.is_empty() {
        let mut dir = OutDir::create(out)?;
        let mut top = Manifest::new("finetune-grid", &cfg.config_hash());
        top.seeds = cfg.run.seeds.clone();
        top.inputs = pre.inputs();
        let mut any_ok = false;
        for &lambda in &cfg.method.lambda_grid {
            let mut point = cfg.clone();
            point.method.lambda = lambda;
            point.method.lambda_grid = Vec::new();
            let sub = format!("lambda_{lambda}");
            let m = cmd_finetune(&point, pre, &out.join(&sub))?;
            any_ok |= m.is_ok();
            top.failed_runs += m.failed_runs;
            top.counters += m.counters;
            top.wall_seconds += m.wall_seconds;
            // The child directory owns its files; list only its manifest.
            let path = format!("{sub}/{MANIFEST}");
            dir.written.push(Artifact {
                sha256: file_hash(&out.join(&path))?,
                path,
            });
        }
        top.xfp = top.counters.xfp();
        if !any_ok {
            top.status = "failed".into();
        }
        dir.write("config.json", &config_json(cfg)?)?;
        return dir.finish(top);
    }

    let hash = cfg.config_hash();
    let method = cfg.method.name;
    let task = suite_tasks(cfg, std::slice::from_ref(&cfg.task.name))?.remove(0);
    let runs = fine_tune_seeds(cfg, pre, &task, method)?;
    pre.verify_unchanged()?;

    let mut dir = OutDir::create(out)?;
    let mut rows = Vec::new();
    let mut top = Manifest::new("finetune", &hash);
    top.seeds = cfg.run.seeds.clone();
    top.method = Some(method.to_string());
    top.task = Some(task.spec.name.clone());
    top.inputs = pre.inputs();
    for run in &runs {
        rows.extend(history_rows(&hash, method, &task.spec.name, run));
        let mut seed_dir = OutDir::create(out)?;
        if run.outcome.status.is_ok() {
            let ckpt = model_checkpoint(&run.outcome.best.encoder, &run.outcome.best.head);
            seed_dir.write(&format!("seeds/seed_{}.ckpt", run.seed), ckpt.render().as_bytes())?;
        }
        let mut m = Manifest::new("finetune", &hash)
            .with_status(&run.outcome.status)
            .with_counters(run.outcome.counters);
        m.seed = Some(run.seed);
        m.seeds = vec![run.seed];
        m.method = top.method.clone();
        m.task = top.task.clone();
        m.wall_seconds = run.seconds;
        m.inputs = pre.inputs();
        m.artifacts = seed_dir.written;
        dir.write_manifest(&format!("seeds/seed_{}.json", run.seed), &m)?;
        top.failed_runs += m.failed_runs;
        top.counters += run.outcome.counters;
        top.wall_seconds += run.seconds;
    }
    top.xfp = top.counters.xfp();
    if let Some(s) = summarize(&ok_bests(&runs)) {
        for (label, v) in [("max", s.max), ("median", s.median)] {
            let mut r = vec![String::new(); FINETUNE_COLUMNS.len()];
            r[0] = hash.clone();
            r[1] = method.to_string();
            r[2] = task.spec.name.clone();
            r[3] = label.to_string();
            r[6] = num(v);
            r[11] = "ok".into();
            rows.push(r);
        }
    }
    dir.write("finetune.csv", &csv_bytes(&FINETUNE_COLUMNS, &rows)?)?;
    dir.write("config.json", &config_json(cfg)?)?;
    if top.failed_runs == runs.len() {
        top.status = "failed".into();
        top.failure = Some("every seed failed".into());
    }
    dir.finish(top)
}

/// Seed distributions of best dev accuracy for every method on every task of
/// `task.names`.
pub fn cmd_stability(cfg: &ExperimentConfig, pre: &Pretrained, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    pre.check_config(cfg)?;
    if cfg.run.seeds.len() < 2 {
        return Err(Error::Config("stability needs at least 2 seeds".into()));
    }
    let hash = cfg.config_hash();
    let tasks = suite_tasks(cfg, &cfg.task.names)?;
    let mut dir = OutDir::create(out)?;
    let mut top = Manifest::new("stability", &hash);
    top.seeds = cfg.run.seeds.clone();
    top.inputs = pre.inputs();
    let mut run_rows = Vec::new();
    let mut summary_rows = Vec::new();
    let mut total_runs = 0;
    for task in &tasks {
        let mut groups = Vec::new();
        for &method in &cfg.method.methods {
            let runs = fine_tune_seeds(cfg, pre, task, method)?;
            for run in &runs {
                run_rows.extend(history_rows(&hash, method, &task.spec.name, run));
                let mut m = Manifest::new("stability", &hash)
                    .with_status(&run.outcome.status)
                    .with_counters(run.outcome.counters);
                m.seed = Some(run.seed);
                m.seeds = vec![run.seed];
                m.method = Some(method.to_string());
                m.task = Some(task.spec.name.clone());
                m.wall_seconds = run.seconds;
                m.inputs = pre.inputs();
                dir.write_manifest(&format!("runs/{}_{method}_seed{}.json", task.spec.name, run.seed), &m)?;
                top.failed_runs += m.failed_runs;
                top.counters += run.outcome.counters;
                top.wall_seconds += run.seconds;
                total_runs += 1;
            }
            let bests = ok_bests(&runs);
            let s = summarize(&bests);
            summary_rows.push(vec![
                hash.clone(),
                task.spec.name.clone(),
                method.to_string(),
                bests.len().to_string(),
                (runs.len() - bests.len()).to_string(),
                opt_num(s.as_ref().map(|s| s.min)),
                opt_num(s.as_ref().map(|s| s.median)),
                opt_num(s.as_ref().map(|s| s.max)),
                opt_num(s.as_ref().map(|s| s.stdev)),
            ]);
            groups.push((method.to_string(), bests));
        }
        let chart = svg::strip_chart(
            &format!("best dev accuracy over seeds: {}", task.spec.name),
            "best dev accuracy",
            &groups,
        );
        dir.write(&format!("stability_{}.svg", task.spec.name), chart.as_bytes())?;
    }
    pre.verify_unchanged()?;
    top.xfp = top.counters.xfp();
    dir.write("stability_runs.csv", &csv_bytes(&FINETUNE_COLUMNS, &run_rows)?)?;
    dir.write(
        "stability.csv",
        &csv_bytes(
            &["config_hash", "task", "method", "runs", "failed", "min", "median", "max", "stdev"],
            &summary_rows,
        )?,
    )?;
    dir.write("config.json", &config_json(cfg)?)?;
    if top.failed_runs == total_runs {
        top.status = "failed".into();
    }
    dir.finish(top)
}

fn chain_rows(hash: &str, r: &ChainResult) -> Vec<Vec<String>> {
    r.stages
        .iter()
        .map(|s| {
            vec![
                hash.to_string(),
                r.method.to_string(),
                s.stage_index.to_string(),
                s.stage_task.clone(),
                s.probe.probe_task.clone(),
                s.cycle.to_string(),
                r.seed.to_string(),
                num(s.probe.accuracy),
            ]
        })
        .collect()
}

fn run_manifest(command: &str, hash: &str, pre: &Pretrained, r: &ChainResult) -> Manifest {
    let mut m = Manifest::new(command, hash).with_status(&r.status).with_counters(r.counters);
    m.seed = Some(r.seed);
    m.seeds = vec![r.seed];
    m.method = Some(r.method.to_string());
    m.inputs = pre.inputs();
    m
}

fn chain_results<F>(cfg: &ExperimentConfig, run: F) -> Result<Vec<ChainResult>>
where
    F: Fn(Method, u64) -> Result<ChainResult> + Sync,
{
    let mut all = Vec::new();
    for &method in &cfg.method.methods {
        all.extend(run_seeds(&cfg.run.seeds, cfg.run.jobs, |seed| run(method, seed))?);
    }
    Ok(all)
}

fn finish_collapse(
    mut dir: OutDir,
    mut top: Manifest,
    cfg: &ExperimentConfig,
    pre: &Pretrained,
    results: &[ChainResult],
) -> Result<Manifest> {
    for r in results {
        let m = run_manifest(&top.command, &top.config_hash, pre, r);
        dir.write_manifest(&format!("runs/{}_seed{}.json", r.method, r.seed), &m)?;
        top.failed_runs += m.failed_runs;
        top.counters += r.counters;
    }
    top.xfp = top.counters.xfp();
    top.seeds = cfg.run.seeds.clone();
    top.inputs = pre.inputs();
    dir.write("config.json", &config_json(cfg)?)?;
    if !results.is_empty() && top.failed_runs == results.len() {
        top.status = "failed".into();
    }
    dir.finish(top)
}

/// Sequential chain: fine-tune `task.source`, then each of `task.chain`,
/// probing the source after every stage.
pub fn cmd_chain(cfg: &ExperimentConfig, pre: &Pretrained, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    pre.check_config(cfg)?;
    let hash = cfg.config_hash();
    let clock = Clock::start(cfg.run.record_wall_clock);
    let source = suite_tasks(cfg, std::slice::from_ref(&cfg.task.source))?.remove(0);
    let chain = suite_tasks(cfg, &cfg.task.chain)?;
    let results = chain_results(cfg, |method, seed| {
        sequential_degradation(&pre.encoder, &source, &chain, method, seed, &cfg.protocol(method))
    })?;
    pre.verify_unchanged()?;

    let mut dir = OutDir::create(out)?;
    let rows: Vec<Vec<String>> = results.iter().flat_map(|r| chain_rows(&hash, r)).collect();
    dir.write("chain.csv", &csv_bytes(&COLLAPSE_COLUMNS, &rows)?)?;

    let stage_tasks: Vec<String> = std::iter::once(&source).chain(&chain).map(|t| t.spec.name.clone()).collect();
    let mut summary = Vec::new();
    let mut series = Vec::new();
    for &method in &cfg.method.methods {
        let mine: Vec<&ChainResult> = results.iter().filter(|r| r.method == method).collect();
        let mut medians = Vec::new();
        for (k, name) in stage_tasks.iter().enumerate() {
            let accs: Vec<f64> = mine.iter().filter_map(|r| r.stages.get(k)).map(|s| s.probe.accuracy).collect();
            let drops: Vec<f64> = mine
                .iter()
                .filter_map(|r| Some(r.stages.first()?.probe.accuracy - r.stages.get(k)?.probe.accuracy))
                .collect();
            let med = median_of(&accs);
            summary.push(vec![
                hash.clone(),
                method.to_string(),
                k.to_string(),
                name.clone(),
                accs.len().to_string(),
                opt_num(med),
                opt_num(median_of(&drops)),
            ]);
            medians.push(med);
        }
        series.push((method.to_string(), medians));
    }
    dir.write(
        "chain_summary.csv",
        &csv_bytes(
            &["config_hash", "method", "stage_index", "stage_task", "seeds", "median_accuracy", "median_drop_from_stage0"],
            &summary,
        )?,
    )?;
    let chart = svg::line_chart(
        &format!("{} probe accuracy along the chain (median over seeds)", source.spec.name),
        "probe accuracy",
        &stage_tasks,
        &series,
    );
    dir.write("chain.svg", chart.as_bytes())?;
    let mut top = Manifest::new("chain", &hash);
    top.task = Some(source.spec.name.clone());
    top.wall_seconds = clock.seconds();
    finish_collapse(dir, top, cfg, pre, &results)
}

/// Cyclic chain over `task.cycle`, repeated `task.cycles` times, probing the
/// next task of the cycle after every stage.
pub fn cmd_cycle(cfg: &ExperimentConfig, pre: &Pretrained, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    pre.check_config(cfg)?;
    let hash = cfg.config_hash();
    let clock = Clock::start(cfg.run.record_wall_clock);
    let tasks = suite_tasks(cfg, &cfg.task.cycle)?;
    let cycles = cfg.task.cycles;
    let results = chain_results(cfg, |method, seed| {
        cyclic_retention(&pre.encoder, &tasks, cycles, method, seed, &cfg.protocol(method))
    })?;
    pre.verify_unchanged()?;

    let mut dir = OutDir::create(out)?;
    let rows: Vec<Vec<String>> = results.iter().flat_map(|r| chain_rows(&hash, r)).collect();
    dir.write("cycle.csv", &csv_bytes(&COLLAPSE_COLUMNS, &rows)?)?;

    let stages = tasks.len() * cycles;
    let labels: Vec<String> = (0..stages).map(|k| format!("{}:{}", k / tasks.len() + 1, tasks[k % tasks.len()].spec.name)).collect();
    let mut summary = Vec::new();
    let mut series = Vec::new();
    for &method in &cfg.method.methods {
        let mine: Vec<&ChainResult> = results.iter().filter(|r| r.method == method).collect();
        for c in 1..=cycles {
            let means: Vec<f64> = mine.iter().filter_map(|r| crate::probes::cycle_mean(r, c)).collect();
            summary.push(vec![
                hash.clone(),
                method.to_string(),
                c.to_string(),
                means.len().to_string(),
                opt_num(median_of(&means)),
            ]);
        }
        let medians = (0..stages)
            .map(|k| {
                let accs: Vec<f64> = mine.iter().filter_map(|r| r.stages.get(k)).map(|s| s.probe.accuracy).collect();
                median_of(&accs)
            })
            .collect();
        series.push((method.to_string(), medians));
    }
    dir.write(
        "cycle_summary.csv",
        &csv_bytes(&["config_hash", "method", "cycle", "seeds", "median_cycle_mean_accuracy"], &summary)?,
    )?;
    let chart = svg::line_chart(
        "next-task probe accuracy per stage (median over seeds)",
        "probe accuracy",
        &labels,
        &series,
    );
    dir.write("cycle.svg", chart.as_bytes())?;
    let mut top = Manifest::new("cycle", &hash);
    top.wall_seconds = clock.seconds();
    finish_collapse(dir, top, cfg, pre, &results)
}

/// Fine-tunes `task.source` with every method and seed and probes each of
/// `task.probe_tasks`; the pretrained encoder is probed as method `none`.
pub fn cmd_probe_matrix(cfg: &ExperimentConfig, pre: &Pretrained, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    pre.check_config(cfg)?;
    let hash = cfg.config_hash();
    let clock = Clock::start(cfg.run.record_wall_clock);
    let source = suite_tasks(cfg, std::slice::from_ref(&cfg.task.source))?.remove(0);
    let targets = suite_tasks(cfg, &cfg.task.probe_tasks)?;
    // Every method shares the regularizer settings; the protocol picks the
    // method per run.
    let protocol = cfg.protocol(cfg.method.name);
    let matrix = generalization_probe_matrix(
        &pre.encoder,
        &source,
        &targets,
        &cfg.method.methods,
        &cfg.run.seeds,
        &protocol,
        cfg.run.jobs,
    )?;
    pre.verify_unchanged()?;

    let mut dir = OutDir::create(out)?;
    let rows: Vec<Vec<String>> = matrix
        .cells
        .iter()
        .map(|c| {
            let baseline = c.method == BASELINE;
            vec![
                hash.clone(),
                c.method.clone(),
                "0".into(),
                if baseline { BASELINE.to_string() } else { source.spec.name.clone() },
                c.probe_task.clone(),
                "1".into(),
                c.seed.to_string(),
                opt_num(c.accuracy),
            ]
        })
        .collect();
    dir.write("probe_matrix.csv", &csv_bytes(&COLLAPSE_COLUMNS, &rows)?)?;

    let medians = matrix.medians();
    let mut labels = vec![BASELINE.to_string()];
    labels.extend(cfg.method.methods.iter().map(Method::to_string));
    let names: Vec<String> = targets.iter().map(|t| t.spec.name.clone()).collect();
    let mut summary = Vec::new();
    let mut series = Vec::new();
    for label in &labels {
        let vals: Vec<Option<f64>> = names
            .iter()
            .map(|t| medians.get(&(label.clone(), t.clone())).copied())
            .collect();
        for (t, v) in names.iter().zip(&vals) {
            summary.push(vec![hash.clone(), label.clone(), t.clone(), opt_num(*v)]);
        }
        series.push((label.clone(), vals));
    }
    dir.write(
        "probe_matrix_summary.csv",
        &csv_bytes(&["config_hash", "method", "probe_task", "median_accuracy"], &summary)?,
    )?;
    let chart = svg::bar_chart(
        &format!("probe accuracy after fine-tuning on {} (median over seeds)", source.spec.name),
        "probe accuracy",
        &names,
        &series,
    );
    dir.write("probe_matrix.svg", chart.as_bytes())?;

    for r in &matrix.runs {
        let mut m = Manifest::new("probe-matrix", &hash)
            .with_status(&r.status)
            .with_counters(r.counters);
        m.seed = Some(r.seed);
        m.seeds = vec![r.seed];
        m.method = Some(r.method.to_string());
        m.task = Some(source.spec.name.clone());
        m.inputs = pre.inputs();
        dir.write_manifest(&format!("runs/{}_seed{}.json", r.method, r.seed), &m)?;
    }
    let mut top = Manifest::new("probe-matrix", &hash);
    top.task = Some(source.spec.name.clone());
    top.seeds = cfg.run.seeds.clone();
    top.inputs = pre.inputs();
    top.wall_seconds = clock.seconds();
    for r in &matrix.runs {
        top.counters += r.counters;
        top.failed_runs += usize::from(!r.status.is_ok());
    }
    top.xfp = top.counters.xfp();
    if !matrix.runs.is_empty() && top.failed_runs == matrix.runs.len() {
        top.status = "failed".into();
    }
    dir.write("config.json", &config_json(cfg)?)?;
    dir.finish(top)
}

/// Closed-form self-tests of the Gaussian KL, then the pushforward trials.
/// Writes the CSV either way; any failing trial is an invariant error whose
/// message lists the failures.
pub fn cmd_theory(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let clock = Clock::start(cfg.run.record_wall_clock);
    let g1 = |mean: f64, var: f64| {
        GaussianDensity::new(
            nalgebra::DVector::from_element(1, mean),
            nalgebra::DMatrix::from_element(1, 1, var),
        )
    };
    let shift = gaussian_kl(&g1(0.0, 1.0)?, &g1(1.0, 1.0)?)?;
    let scale = gaussian_kl(&g1(0.0, 1.0)?, &g1(0.0, 4.0)?)?;
    let mut failures = Vec::new();
    if (shift - 0.5).abs() > 1e-6 {
        failures.push(format!("self-test KL(N(0,1)||N(1,1)) = {shift}, expected 0.5"));
    }
    if (scale - 0.318147).abs() > 1e-6 {
        failures.push(format!("self-test KL(N(0,1)||N(0,4)) = {scale}, expected 0.318147"));
    }

    let trials = lipschitz_bound_experiment(cfg.theory.dim, cfg.theory.trials, cfg.theory.seed)?;
    let rows: Vec<Vec<String>> = trials
        .iter()
        .map(|t| {
            vec![
                hash.clone(),
                t.trial.to_string(),
                t.dim_in.to_string(),
                t.dim_out.to_string(),
                opt_num(t.abs_det),
                num(t.kl_repr),
                num(t.kl_output),
                t.relation.clone(),
                t.passed.to_string(),
            ]
        })
        .collect();
    failures.extend(trials.iter().filter(|t| !t.passed).map(|t| {
        format!(
            "trial {} ({}x{}): kl_repr {} kl_output {} relation {}",
            t.trial, t.dim_out, t.dim_in, t.kl_repr, t.kl_output, t.relation
        )
    }));

    let mut dir = OutDir::create(out)?;
    dir.write(
        "theory.csv",
        &csv_bytes(
            &["config_hash", "trial", "dim_in", "dim_out", "abs_det", "kl_repr", "kl_output", "relation", "passed"],
            &rows,
        )?,
    )?;
    dir.write("config.json", &config_json(cfg)?)?;
    let mut m = Manifest::new("theory", &hash);
    m.seed = Some(cfg.theory.seed);
    m.seeds = vec![cfg.theory.seed];
    m.wall_seconds = clock.seconds();
    if !failures.is_empty() {
        m.status = "failed".into();
        m.failed_runs = failures.len();
        m.failure = Some(failures.join("; "));
    }
    let m = dir.finish(m)?;
    if failures.is_empty() {
        Ok(m)
    } else {
        Err(Error::Invariant(format!("{} theory check(s) failed:\n{}", failures.len(), failures.join("\n"))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub method: String,
    pub task: String,
    pub config_hash: String,
    pub seeds: usize,
    pub max: f64,
    pub median: f64,
}

type SeedBests = BTreeMap<(String, String), (String, BTreeMap<u64, f64>)>;

fn collect_report_rows(dir: &Path, cells: &mut SeedBests) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    manifest.verify(dir)?;
    for a in &manifest.artifacts {
        let name = Path::new(&a.path).file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name == MANIFEST {
            let child = dir.join(&a.path);
            collect_report_rows(child.parent().expect("manifest has a parent"), cells)?;
            continue;
        }
        if name != "finetune.csv" && name != "stability_runs.csv" {
            continue;
        }
        let mut reader = csv::Reader::from_path(dir.join(&a.path))?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != FINETUNE_COLUMNS {
            return Err(Error::InvalidInput(format!("{}: unexpected columns", a.path)));
        }
        for rec in reader.records() {
            let rec = rec?;
            let Ok(seed) = rec[3].parse::<u64>() else { continue };
            if &rec[11] != "ok" {
                continue;
            }
            let best: f64 = rec[6]
                .parse()
                .map_err(|e| Error::InvalidInput(format!("{}: best_dev_accuracy '{}': {e}", a.path, &rec[6])))?;
            let key = (rec[1].to_string(), rec[2].to_string());
            let entry = cells.entry(key.clone()).or_insert_with(|| (rec[0].to_string(), BTreeMap::new()));
            if entry.0 != rec[0] {
                return Err(Error::InvalidInput(format!(
                    "conflicting config hashes for ({}, {}): {} and {}",
                    key.0, key.1, entry.0, &rec[0]
                )));
            }
            // Rows are in epoch order, so the last one carries the final best.
            entry.1.insert(seed, best);
        }
    }
    Ok(())
}

/// Joins fine-tuning runs into a method x task table with max-over-seeds and
/// median-over-seeds blocks side by side.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<ReportCell>> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut seed_bests = SeedBests::new();
    for d in run_dirs {
        collect_report_rows(d, &mut seed_bests)?;
    }
    let cells: Vec<ReportCell> = seed_bests
        .into_iter()
        .filter_map(|((method, task), (config_hash, bests))| {
            let v: Vec<f64> = bests.values().copied().collect();
            let s = summarize(&v)?;
            Some(ReportCell {
                method,
                task,
                config_hash,
                seeds: s.n,
                max: s.max,
                median: s.median,
            })
        })
        .collect();
    if cells.is_empty() {
        return Err(Error::InvalidInput("no successful fine-tuning rows in the given run directories".into()));
    }

    let tasks: Vec<String> = cells.iter().map(|c| c.task.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let methods: Vec<String> = cells.iter().map(|c| c.method.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let lookup: BTreeMap<(&str, &str), &ReportCell> =
        cells.iter().map(|c| ((c.method.as_str(), c.task.as_str()), c)).collect();
    let mut header = vec!["method".to_string()];
    header.extend(tasks.iter().map(|t| format!("max:{t}")));
    header.extend(tasks.iter().map(|t| format!("median:{t}")));
    let wide: Vec<Vec<String>> = methods
        .iter()
        .map(|m| {
            let mut row = vec![m.clone()];
            for pick in [|c: &ReportCell| c.max, |c: &ReportCell| c.median] {
                row.extend(tasks.iter().map(|t| opt_num(lookup.get(&(m.as_str(), t.as_str())).map(|c| pick(c)))));
            }
            row
        })
        .collect();
    let long: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.method.clone(),
                c.task.clone(),
                c.config_hash.clone(),
                c.seeds.to_string(),
                num(c.max),
                num(c.median),
            ]
        })
        .collect();

    let hashes: BTreeSet<&str> = cells.iter().map(|c| c.config_hash.as_str()).collect();
    let combined = hex::encode(Sha256::digest(hashes.into_iter().collect::<Vec<_>>().join(",").as_bytes()));
    let mut dir = OutDir::create(out)?;
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    dir.write("report.csv", &csv_bytes(&header_refs, &wide)?)?;
    dir.write(
        "report_cells.csv",
        &csv_bytes(&["method", "task", "config_hash", "seeds", "max", "median"], &long)?,
    )?;
    let pretty: Vec<Vec<String>> = wide
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(i, v)| if i == 0 { v.clone() } else { v.parse::<f64>().map_or(v.clone(), |x| format!("{x:.3}")) })
                .collect()
        })
        .collect();
    dir.write(
        "report.svg",
        svg::table("best dev accuracy: max over seeds | median over seeds", &header, &pretty).as_bytes(),
    )?;
    dir.finish(Manifest::new("report", &combined))?;
    Ok(cells)
}

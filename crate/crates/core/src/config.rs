//! Experiment configuration: a TOML document whose leaves are addressed by
//! dotted keys (`model.dim`, `optim.adam.beta2`, ...). Every key must exist in
//! the default configuration; anything else is rejected so typos cannot
//! silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, PretrainConfig};
use crate::objectives::{BallNorm, Method, NoiseDist, RegularizerConfig, TrainConfig};
use crate::probes::{ProbeConfig, Protocol};
use crate::tasks::SuiteConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(flatten)]
    pub encoder: EncoderConfig,
    pub head_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSection {
    pub suite_seed: u64,
    #[serde(flatten)]
    pub suite: SuiteConfig,
    /// Task fine-tuned by `finetune`.
    pub name: String,
    /// Tasks swept by `stability`.
    pub names: Vec<String>,
    pub source: String,
    pub chain: Vec<String>,
    pub cycle: Vec<String>,
    pub cycles: usize,
    pub probe_tasks: Vec<String>,
}

impl Default for TaskSection {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            suite_seed: 0,
            suite: SuiteConfig::default(),
            name: "keyword_src".into(),
            names: s(&["keyword_src"]),
            source: "keyword_src".into(),
            chain: s(&["order", "majority", "parity"]),
            cycle: s(&["keyword_src", "order", "majority", "parity"]),
            cycles: 2,
            probe_tasks: s(&["majority", "order", "parity", "keyword_b", "majority3", "order_b"]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSection {
    /// Method used by `finetune`.
    pub name: Method,
    /// Methods compared by `stability`, `chain`, `cycle` and `probe-matrix`.
    pub methods: Vec<Method>,
    pub lambda: f64,
    /// When non-empty, `finetune` runs once per value, each in its own
    /// run directory.
    pub lambda_grid: Vec<f64>,
    pub noise_dist: NoiseDist,
    pub sigma: f64,
    pub epsilon: f64,
    pub ascent_steps: usize,
    pub ascent_lr: f64,
    pub label_smoothing_alpha: f64,
    pub ball_norm: BallNorm,
}

impl Default for MethodSection {
    fn default() -> Self {
        let r = RegularizerConfig::default();
        Self {
            name: Method::Standard,
            methods: vec![Method::Standard, Method::R3f, Method::R4f],
            lambda: r.lambda,
            lambda_grid: Vec::new(),
            noise_dist: r.noise_dist,
            sigma: r.sigma,
            epsilon: r.epsilon,
            ascent_steps: r.ascent_steps,
            ascent_lr: r.ascent_lr,
            label_smoothing_alpha: r.label_smoothing_alpha,
            ball_norm: r.ball_norm,
        }
    }
}

impl MethodSection {
    pub fn regularizer(&self, method: Method) -> RegularizerConfig {
        RegularizerConfig {
            method,
            lambda: self.lambda,
            noise_dist: self.noise_dist,
            sigma: self.sigma,
            epsilon: self.epsilon,
            ascent_steps: self.ascent_steps,
            ascent_lr: self.ascent_lr,
            label_smoothing_alpha: self.label_smoothing_alpha,
            ball_norm: self.ball_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySection {
    pub dim: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            dim: 4,
            trials: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub pretrain_seed: u64,
    /// Pretrained encoder checkpoint used by every command except
    /// `pretrain`, `theory` and `report`.
    pub checkpoint: Option<String>,
    /// Record measured wall-clock seconds; off by default so outputs are
    /// byte-identical across reruns.
    pub record_wall_clock: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            jobs: 1,
            pretrain_seed: 0,
            checkpoint: None,
            record_wall_clock: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub task: TaskSection,
    pub method: MethodSection,
    pub optim: TrainConfig,
    pub probe: ProbeConfig,
    pub theory: TheorySection,
    pub run: RunSection,
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

/// Dotted-key view of a nested document; arrays and scalars are leaves.
pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", v, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted prefixes are tables");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl ExperimentConfig {
    pub fn flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Parses a TOML document over the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let user = serde_json::to_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_overrides(&flatten(&user))
    }

    /// Applies dotted-key overrides to the defaults.
    pub fn from_overrides(overrides: &BTreeMap<String, Value>) -> Result<Self> {
        let mut flat = Self::default().flat();
        let unknown: Vec<&str> = overrides
            .keys()
            .filter(|k| !flat.contains_key(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        for (k, v) in overrides {
            flat.insert(k.clone(), v.clone());
        }
        let cfg: Self =
            serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(format!("invalid config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(d) => Error::Config(format!("{}: {d}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        if self.model.head_layers == 0 {
            return Err(Error::Config("model.head_layers must be >= 1".into()));
        }
        self.pretrain.validate()?;
        self.optim.validate()?;
        self.probe.validate()?;
        for m in std::iter::once(self.method.name).chain(self.method.methods.iter().copied()) {
            self.method.regularizer(m).validate()?;
        }
        if self.method.lambda_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("method.lambda_grid values must be finite and >= 0".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        if self.model.encoder.vocab_size != self.task.suite.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} differs from task.vocab_size {}",
                self.model.encoder.vocab_size, self.task.suite.vocab_size
            )));
        }
        if self.task.suite.seq_len > self.model.encoder.max_len {
            return Err(Error::Config(format!(
                "task.seq_len {} exceeds model.max_len {}",
                self.task.suite.seq_len, self.model.encoder.max_len
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (sorted dotted-key) JSON form, so key order in
    /// the source document never matters. `run.jobs` is left out: worker count
    /// does not change results.
    pub fn config_hash(&self) -> String {
        let mut flat = self.flat();
        flat.remove("run.jobs");
        let canonical = serde_json::to_string(&flat).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn protocol(&self, method: Method) -> Protocol {
        Protocol {
            regularizer: self.method.regularizer(method),
            train: self.optim.clone(),
            probe: self.probe.clone(),
            head_layers: self.model.head_layers,
        }
    }

    pub fn checkpoint_path(&self) -> Result<PathBuf> {
        self.run.checkpoint.as_ref().map(PathBuf::from).ok_or_else(|| {
            Error::Config("run.checkpoint is not set; point it at the output of `trusttune pretrain`".into())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn dotted_and_table_forms_agree() {
        let a = ExperimentConfig::from_toml_str("model.dim = 8\noptim.adam.beta2 = 0.99\n").unwrap();
        let b = ExperimentConfig::from_toml_str("[optim.adam]\nbeta2 = 0.99\n[model]\ndim = 8\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.config_hash(), b.config_hash());
        assert_eq!(a.model.encoder.dim, 8);
        assert_ne!(a.config_hash(), ExperimentConfig::default().config_hash());
        let mut c = a.clone();
        c.run.jobs = 4;
        assert_eq!(c.config_hash(), a.config_hash());
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = ExperimentConfig::from_toml_str("model.dimm = 8\noptim.lr = 1\n").unwrap_err();
        match err {
            Error::Config(msg) => {
                assert!(msg.contains("model.dimm") && msg.contains("optim.lr"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            ExperimentConfig::from_toml_str("model.dimm = 8").unwrap_err().exit_code(),
            2
        );
    }

    #[test]
    fn enums_and_optionals_parse() {
        let cfg = ExperimentConfig::from_toml_str(
            "method.name = \"r4f\"\nmethod.noise_dist = \"uniform\"\noptim.clip_norm = 0.1\nrun.checkpoint = \"x.ckpt\"\n",
        )
        .unwrap();
        assert_eq!(cfg.method.name, Method::R4f);
        assert_eq!(cfg.optim.clip_norm, Some(0.1));
        assert!(ExperimentConfig::from_toml_str("method.name = \"sgd\"").is_err());
        assert!(ExperimentConfig::from_toml_str("model.dim = \"wide\"").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["run.seeds = []", "method.lambda = -1.0", "optim.batch_size = 0"] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }
}

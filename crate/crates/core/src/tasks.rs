//! Synthetic classification tasks over one shared vocabulary, and the
//! unlabeled corpus used for masked-token pretraining.
//!
//! Every sequence starts with the CLS id. Four task families:
//!
//! * `KEYWORD`: label 1 when any of the keywords occurs.
//! * `MAJORITY`: label = the token group with strictly the most occurrences.
//! * `ORDER`: label 1 when the first `a` precedes the first `b`.
//! * `PARITY`: label = number of occurrences of one token, mod 2.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, named_stream, StreamRng};

pub const CLS: u32 = 0;
pub const MASK: u32 = 1;
pub const PAD: u32 = 2;
pub const FIRST_CONTENT: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 8 {
            return Err(Error::Config(format!("vocabulary size {size} < 8")));
        }
        Ok(Self { size })
    }

    pub fn content(&self) -> std::ops::Range<u32> {
        FIRST_CONTENT..self.size as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Family {
    Keyword,
    Majority,
    Order,
    Parity,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Keyword => "KEYWORD",
            Family::Majority => "MAJORITY",
            Family::Order => "ORDER",
            Family::Parity => "PARITY",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "KEYWORD" => Ok(Family::Keyword),
            "MAJORITY" => Ok(Family::Majority),
            "ORDER" => Ok(Family::Order),
            "PARITY" => Ok(Family::Parity),
            other => Err(Error::InvalidInput(format!("unknown task family '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "UPPERCASE")]
pub enum FamilyParams {
    Keyword { keywords: Vec<u32> },
    Majority { groups: Vec<Vec<u32>> },
    Order { a: u32, b: u32 },
    Parity { token: u32 },
}

impl FamilyParams {
    pub fn family(&self) -> Family {
        match self {
            FamilyParams::Keyword { .. } => Family::Keyword,
            FamilyParams::Majority { .. } => Family::Majority,
            FamilyParams::Order { .. } => Family::Order,
            FamilyParams::Parity { .. } => Family::Parity,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            FamilyParams::Majority { groups } => groups.len(),
            _ => 2,
        }
    }

    fn tokens(&self) -> Vec<u32> {
        match self {
            FamilyParams::Keyword { keywords } => keywords.clone(),
            FamilyParams::Majority { groups } => groups.concat(),
            FamilyParams::Order { a, b } => vec![*a, *b],
            FamilyParams::Parity { token } => vec![*token],
        }
    }
}

/// The family labeling rule. `None` when the rule is undefined for the
/// sequence (a MAJORITY tie).
pub fn label_of(params: &FamilyParams, tokens: &[u32]) -> Option<usize> {
    match params {
        FamilyParams::Keyword { keywords } => Some(tokens.iter().any(|t| keywords.contains(t)) as usize),
        FamilyParams::Majority { groups } => {
            let counts: Vec<usize> = groups
                .iter()
                .map(|g| tokens.iter().filter(|t| g.contains(t)).count())
                .collect();
            let best = *counts.iter().max()?;
            let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
            let (idx, _) = winners.next()?;
            winners.next().is_none().then_some(idx)
        }
        FamilyParams::Order { a, b } => {
            let pos = |x: u32| tokens.iter().position(|&t| t == x).unwrap_or(usize::MAX);
            Some((pos(*a) < pos(*b)) as usize)
        }
        FamilyParams::Parity { token } => Some(tokens.iter().filter(|&&t| t == *token).count() % 2),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub params: FamilyParams,
    pub seed: u64,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
}

impl TaskSpec {
    pub fn family(&self) -> Family {
        self.params.family()
    }

    pub fn classes(&self) -> usize {
        self.params.classes()
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = Vocabulary::new(self.vocab_size)?;
        if self.seq_len < 2 {
            return Err(Error::Generation(format!("{}: sequence length {} < 2", self.name, self.seq_len)));
        }
        if self.train_size == 0 || self.dev_size == 0 {
            return Err(Error::Generation(format!("{}: empty split requested", self.name)));
        }
        let toks = self.params.tokens();
        if toks.iter().any(|t| !vocab.content().contains(t)) {
            return Err(Error::Generation(format!("{}: rule token outside content range", self.name)));
        }
        let distinct: HashSet<_> = toks.iter().collect();
        if distinct.len() != toks.len() {
            return Err(Error::Generation(format!("{}: rule tokens repeat", self.name)));
        }
        let content = vocab.content().len();
        match &self.params {
            FamilyParams::Keyword { keywords } if keywords.is_empty() || keywords.len() >= content => {
                Err(Error::Generation(format!("{}: keyword set must be a proper non-empty subset", self.name)))
            }
            FamilyParams::Majority { groups } if groups.len() < 2 || groups.iter().any(Vec::is_empty) => {
                Err(Error::Generation(format!("{}: MAJORITY needs >= 2 non-empty groups", self.name)))
            }
            FamilyParams::Order { .. } if self.seq_len < 3 => Err(Error::Generation(format!(
                "{}: ORDER needs two free positions, sequence length is {}",
                self.name, self.seq_len
            ))),
            FamilyParams::Order { .. } | FamilyParams::Parity { .. } if content < 3 => {
                Err(Error::Generation(format!("{}: too few content tokens", self.name)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// One split plus the header fields of its file form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub family: Family,
    pub seed: u64,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub examples: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Split,
    pub dev: Split,
}

impl TaskData {
    pub fn classes(&self) -> usize {
        self.spec.classes()
    }
}

fn uniform_excluding(rng: &mut StreamRng, vocab: &Vocabulary, exclude: &[u32]) -> u32 {
    loop {
        let t = rng.random_range(vocab.content());
        if !exclude.contains(&t) {
            return t;
        }
    }
}

fn propose(params: &FamilyParams, vocab: &Vocabulary, m: usize, rng: &mut StreamRng) -> Vec<u32> {
    let body = m - 1;
    let mut toks = Vec::with_capacity(m);
    toks.push(CLS);
    match params {
        FamilyParams::Keyword { .. } => {
            toks.extend((0..body).map(|_| rng.random_range(vocab.content())));
        }
        FamilyParams::Majority { groups } => {
            let dominant = &groups[rng.random_range(0..groups.len())];
            toks.extend((0..body).map(|_| {
                if rng.random_bool(0.5) {
                    dominant[rng.random_range(0..dominant.len())]
                } else {
                    rng.random_range(vocab.content())
                }
            }));
        }
        FamilyParams::Order { a, b } => {
            let mut slots: Vec<usize> = (0..body).collect();
            slots.shuffle(rng);
            let mut inner: Vec<u32> = (0..body).map(|_| uniform_excluding(rng, vocab, &[*a, *b])).collect();
            inner[slots[0]] = *a;
            inner[slots[1]] = *b;
            toks.extend(inner);
        }
        FamilyParams::Parity { token } => {
            let k = rng.random_range(0..=4usize.min(body));
            let mut slots: Vec<usize> = (0..body).collect();
            slots.shuffle(rng);
            let mut inner: Vec<u32> = (0..body).map(|_| uniform_excluding(rng, vocab, &[*token])).collect();
            for &s in &slots[..k] {
                inner[s] = *token;
            }
            toks.extend(inner);
        }
    }
    toks
}

fn quotas(n: usize, q: usize) -> Vec<usize> {
    (0..q).map(|c| n / q + usize::from(c < n % q)).collect()
}

/// Deterministic train/dev generation with exact per-class quotas,
/// rejection of undefined labels and of duplicate sequences.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let vocab = Vocabulary::new(spec.vocab_size)?;
    let mut rng = named_stream(spec.seed, "task-generation");
    let q = spec.classes();
    let budget = 100 * (spec.train_size + spec.dev_size);
    let mut attempts = 0usize;
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut splits = Vec::with_capacity(2);
    for size in [spec.train_size, spec.dev_size] {
        let mut remaining = quotas(size, q);
        let mut examples = Vec::with_capacity(size);
        while examples.len() < size {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Generation(format!(
                    "{}: could not fill class quotas within {budget} attempts",
                    spec.name
                )));
            }
            let tokens = propose(&spec.params, &vocab, spec.seq_len, &mut rng);
            let Some(label) = label_of(&spec.params, &tokens) else { continue };
            if remaining[label] == 0 || seen.contains(&tokens) {
                continue;
            }
            remaining[label] -= 1;
            seen.insert(tokens.clone());
            examples.push(Example { tokens, label });
        }
        examples.shuffle(&mut rng);
        splits.push(Split {
            family: spec.family(),
            seed: spec.seed,
            vocab_size: spec.vocab_size,
            seq_len: spec.seq_len,
            examples,
        });
    }
    let dev = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(TaskData {
        spec: spec.clone(),
        train,
        dev,
    })
}

/// Suite-level knobs shared by all seven tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 16,
            train_size: 2000,
            dev_size: 500,
        }
    }
}

/// Names of the suite tasks, by index.
pub const SUITE_NAMES: [&str; 7] = [
    "keyword_src",
    "majority",
    "order",
    "parity",
    "keyword_b",
    "majority3",
    "order_b",
];

/// Seven tasks over one vocabulary with disjoint rule tokens:
/// 0 KEYWORD (source), 1 MAJORITY (2 groups), 2 ORDER, 3 PARITY,
/// 4 KEYWORD, 5 MAJORITY (3 groups), 6 ORDER.
pub fn task_suite(master_seed: u64, cfg: &SuiteConfig) -> Result<Vec<TaskSpec>> {
    let vocab = Vocabulary::new(cfg.vocab_size)?;
    let mut pool: Vec<u32> = vocab.content().collect();
    pool.shuffle(&mut named_stream(master_seed, "suite-tokens"));
    let needed = 3 + 8 + 2 + 1 + 3 + 12 + 2;
    if pool.len() < needed + 3 {
        return Err(Error::Generation(format!(
            "suite needs more than {needed} content tokens, vocabulary has {}",
            pool.len()
        )));
    }
    let mut take = |k: usize| -> Vec<u32> { pool.drain(..k).collect() };
    let params = vec![
        FamilyParams::Keyword { keywords: take(3) },
        FamilyParams::Majority { groups: vec![take(4), take(4)] },
        {
            let t = take(2);
            FamilyParams::Order { a: t[0], b: t[1] }
        },
        FamilyParams::Parity { token: take(1)[0] },
        FamilyParams::Keyword { keywords: take(3) },
        FamilyParams::Majority { groups: vec![take(4), take(4), take(4)] },
        {
            let t = take(2);
            FamilyParams::Order { a: t[0], b: t[1] }
        },
    ];
    Ok(params
        .into_iter()
        .zip(SUITE_NAMES)
        .map(|(params, name)| TaskSpec {
            name: name.to_string(),
            params,
            seed: derive_seed(master_seed, name),
            vocab_size: cfg.vocab_size,
            seq_len: cfg.seq_len,
            train_size: cfg.train_size,
            dev_size: cfg.dev_size,
        })
        .collect())
}

/// Copy of `task` whose labels are drawn independently of the inputs
/// (balanced), for chance-level probe controls.
pub fn with_random_labels(task: &TaskData, seed: u64) -> TaskData {
    let mut rng = named_stream(seed, "random-labels");
    let q = task.classes();
    let relabel = |split: &Split, rng: &mut StreamRng| {
        let mut labels: Vec<usize> = (0..split.examples.len()).map(|i| i % q).collect();
        labels.shuffle(rng);
        let mut s = split.clone();
        s.examples.iter_mut().zip(labels).for_each(|(e, l)| e.label = l);
        s
    };
    TaskData {
        spec: task.spec.clone(),
        train: relabel(&task.train, &mut rng),
        dev: relabel(&task.dev, &mut rng),
    }
}

// ------------------------------------------------------------ split files

fn header(split: &Split) -> String {
    format!(
        "# family={} seed={} V={} m={}",
        split.family, split.seed, split.vocab_size, split.seq_len
    )
}

pub fn render_split(split: &Split) -> String {
    let mut out = header(split);
    out.push('\n');
    for e in &split.examples {
        let ids: Vec<String> = e.tokens.iter().map(u32::to_string).collect();
        out.push_str(&format!("{}\t{}\n", e.label, ids.join(" ")));
    }
    out
}

pub fn export_split(split: &Split, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(render_split(split).as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn parse_split(text: &str, path: &Path) -> Result<Split> {
    let perr = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let fields = head
        .strip_prefix("# ")
        .ok_or_else(|| perr(1, "header must start with '# '".into()))?;
    let mut family = None;
    let mut seed = None;
    let mut vocab_size = None;
    let mut seq_len = None;
    for kv in fields.split(' ') {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| perr(1, format!("malformed header field '{kv}'")))?;
        let num = |v: &str| v.parse::<u64>().map_err(|e| perr(1, format!("header {k}: {e}")));
        match k {
            "family" => family = Some(v.parse::<Family>().map_err(|e| perr(1, e.to_string()))?),
            "seed" => seed = Some(num(v)?),
            "V" => vocab_size = Some(num(v)? as usize),
            "m" => seq_len = Some(num(v)? as usize),
            other => return Err(perr(1, format!("unknown header field '{other}'"))),
        }
    }
    let (Some(family), Some(seed), Some(vocab_size), Some(seq_len)) = (family, seed, vocab_size, seq_len) else {
        return Err(perr(1, "header needs family, seed, V and m".into()));
    };
    let mut examples = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let (label, ids) = line
            .split_once('\t')
            .ok_or_else(|| perr(n, "expected 'label<TAB>ids'".into()))?;
        let label = label.parse::<usize>().map_err(|e| perr(n, format!("label: {e}")))?;
        let tokens = ids
            .split(' ')
            .map(|t| t.parse::<u32>().map_err(|e| perr(n, format!("token '{t}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if tokens.len() != seq_len {
            return Err(perr(n, format!("{} tokens, header says m={seq_len}", tokens.len())));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(perr(n, format!("token {bad} outside V={vocab_size}")));
        }
        examples.push(Example { tokens, label });
    }
    Ok(Split {
        family,
        seed,
        vocab_size,
        seq_len,
        examples,
    })
}

pub fn import_split(path: &Path) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&text, path)
}

/// Imports a split and rejects it unless its header matches the vocabulary
/// size and sequence length in use.
pub fn import_split_for(path: &Path, vocab_size: usize, seq_len: usize) -> Result<Split> {
    let split = import_split(path)?;
    if split.vocab_size != vocab_size || split.seq_len != seq_len {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            detail: format!(
                "header V={} m={} does not match current V={vocab_size} m={seq_len}",
                split.vocab_size, split.seq_len
            ),
        });
    }
    Ok(split)
}

// ------------------------------------------------------- pretraining data

/// Unlabeled sequences from a topic mixture: every sequence picks one of
/// [`CORPUS_TOPICS`] topics (a random set of [`TOPIC_SIZE`] content tokens)
/// and draws each token from it with probability 0.8, otherwise uniformly.
pub fn generate_corpus(vocab_size: usize, seq_len: usize, size: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let vocab = Vocabulary::new(vocab_size)?;
    if seq_len < 2 || size == 0 {
        return Err(Error::Config("corpus needs seq_len >= 2 and size >= 1".into()));
    }
    let mut rng = named_stream(seed, "corpus");
    let content: Vec<u32> = vocab.content().collect();
    let k = TOPIC_SIZE.min(content.len());
    let topics: Vec<Vec<u32>> = (0..CORPUS_TOPICS)
        .map(|_| content.choose_multiple(&mut rng, k).copied().collect())
        .collect();
    Ok((0..size)
        .map(|_| {
            let topic = &topics[rng.random_range(0..topics.len())];
            let mut seq = vec![CLS];
            while seq.len() < seq_len {
                seq.push(if rng.random_bool(0.8) {
                    topic[rng.random_range(0..topic.len())]
                } else {
                    rng.random_range(vocab.content())
                });
            }
            seq
        })
        .collect())
}

pub const CORPUS_TOPICS: usize = 12;
pub const TOPIC_SIZE: usize = 5;

#[cfg(test)]
mod tests {
    use super::*;

    fn small_suite() -> Vec<TaskSpec> {
        let cfg = SuiteConfig {
            train_size: 200,
            dev_size: 60,
            ..SuiteConfig::default()
        };
        task_suite(11, &cfg).unwrap()
    }

    #[test]
    fn suite_shape() {
        let s = small_suite();
        assert_eq!(s.len(), 7);
        assert!(s.iter().all(|t| t.vocab_size == 64 && t.seq_len == 16));
        assert_eq!(s[5].classes(), 3);
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        for spec in small_suite() {
            let a = generate_task(&spec).unwrap();
            assert_eq!(a, generate_task(&spec).unwrap());
            let q = spec.classes();
            for split in [&a.train, &a.dev] {
                for c in 0..q {
                    let n = split.examples.iter().filter(|e| e.label == c).count();
                    assert!(n.abs_diff(split.examples.len() / q) <= 1);
                }
            }
        }
    }

    #[test]
    fn order_infeasible_when_too_short() {
        let mut spec = small_suite()[2].clone();
        spec.seq_len = 2;
        assert!(matches!(generate_task(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn majority_tie_is_undefined() {
        let p = FamilyParams::Majority {
            groups: vec![vec![3], vec![4]],
        };
        assert_eq!(label_of(&p, &[0, 3, 4, 5]), None);
        assert_eq!(label_of(&p, &[0, 3, 4, 4]), Some(1));
    }

    #[test]
    fn hand_written_file_parses() {
        let text = "# family=ORDER seed=5 V=8 m=3\n1\t0 3 4\n0\t0 4 3\n";
        let s = parse_split(text, Path::new("x.tsv")).unwrap();
        assert_eq!(s.family, Family::Order);
        assert_eq!(s.examples[1], Example { tokens: vec![0, 4, 3], label: 0 });
        let err = parse_split("# family=ORDER seed=5 V=8 m=3\n1\t0 3\n", Path::new("x.tsv")).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_corpus(64, 16, 10, 3).unwrap();
        assert_eq!(a, generate_corpus(64, 16, 10, 3).unwrap());
        assert!(a.iter().all(|s| s.len() == 16 && s[0] == CLS && s[1..].iter().all(|&t| t >= FIRST_CONTENT)));
    }
}

//! Tiny pre-LN transformer encoder `f: tokens -> R^n`.
//!
//! Embedding lookup, sinusoidal positions, then `blocks` residual blocks of
//! single-head self-attention and a tanh feed-forward layer, each behind its
//! own layer norm. The representation is the final residual stream pooled by
//! either the first (CLS) position or the mean over positions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    FirstToken,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_token" => Ok(Pooling::FirstToken),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::Config(format!("unknown pooling '{other}'"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::FirstToken => "first_token",
            Pooling::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub pooling: Pooling,
    pub position_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            dim: 16,
            blocks: 2,
            ffn_dim: 32,
            max_len: 16,
            pooling: Pooling::FirstToken,
            position_encoding: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        // Three ids are reserved (CLS, MASK, PAD); task vocabularies enforce V >= 8.
        if self.vocab_size < 3 {
            return Err(Error::Config(format!("vocab_size {} < 3", self.vocab_size)));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("dim {} < 2", self.dim)));
        }
        if self.blocks < 1 || self.ffn_dim < 1 || self.max_len < 1 {
            return Err(Error::Config("blocks, ffn_dim and max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameters of one residual block. Weights are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2",
];

impl BlockParams {
    fn fields(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.wk, &self.wv, &self.wo,
            &self.ln2_gain, &self.ln2_bias, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.wk, &mut self.wv,
            &mut self.wo, &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w1, &mut self.b1,
            &mut self.w2, &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embedding: Tensor,
    pub blocks: Vec<BlockParams>,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

/// Graph handles of the encoder parameters.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub embedding: NodeId,
    blocks: Vec<BlockVars>,
}

impl EncoderVars {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding];
        for b in &self.blocks {
            out.extend([
                b.ln1_gain, b.ln1_bias, b.wq, b.wk, b.wv, b.wo, b.ln2_gain, b.ln2_bias, b.w1,
                b.b1, b.w2, b.b2,
            ]);
        }
        out
    }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let vals = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, vals).expect("positive dims")
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (v, n, h) = (config.vocab_size, config.dim, config.ffn_dim);
        let embedding = normal_matrix(rng, v, n, 0.1);
        let proj = 1.0 / (n as f64).sqrt();
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                ln1_gain: Tensor::vector(vec![1.0; n]).unwrap(),
                ln1_bias: Tensor::zeros(&[n]),
                wq: normal_matrix(rng, n, n, proj),
                wk: normal_matrix(rng, n, n, proj),
                wv: normal_matrix(rng, n, n, proj),
                wo: normal_matrix(rng, n, n, proj),
                ln2_gain: Tensor::vector(vec![1.0; n]).unwrap(),
                ln2_bias: Tensor::zeros(&[n]),
                w1: normal_matrix(rng, n, h, proj),
                b1: Tensor::zeros(&[h]),
                w2: normal_matrix(rng, h, n, 1.0 / (h as f64).sqrt()),
                b2: Tensor::zeros(&[n]),
            })
            .collect();
        Ok(Self {
            config,
            embedding,
            blocks,
        })
    }

    /// Parameter tensors with stable names, in registration order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out
    }

    pub fn num_tensors(&self) -> usize {
        1 + 12 * self.blocks.len()
    }

    /// Registers every tensor as a leaf (trainable or constant).
    pub fn register(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        let ids: Vec<NodeId> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect();
        self.vars_from(&ids)
    }

    /// Builds handles from ids given in [`EncoderParams::named_tensors`] order.
    pub fn vars_from(&self, ids: &[NodeId]) -> EncoderVars {
        assert_eq!(ids.len(), self.num_tensors(), "encoder id count");
        let blocks = ids[1..]
            .chunks(12)
            .map(|c| BlockVars {
                ln1_gain: c[0],
                ln1_bias: c[1],
                wq: c[2],
                wk: c[3],
                wv: c[4],
                wo: c[5],
                ln2_gain: c[6],
                ln2_bias: c[7],
                w1: c[8],
                b1: c[9],
                w2: c[10],
                b2: c[11],
            })
            .collect();
        EncoderVars {
            embedding: ids[0],
            blocks,
        }
    }

    /// Content hash over names, shapes and value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Sinusoidal position encoding row for position `pos`.
pub fn position_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn validate_batch(config: &EncoderConfig, batch: &[&[u32]]) -> Result<usize> {
    let Some(first) = batch.first() else {
        return Err(Error::InvalidInput("empty batch".into()));
    };
    let m = first.len();
    if m == 0 {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if m > config.max_len {
        return Err(Error::InvalidInput(format!(
            "sequence length {m} exceeds max_len {}",
            config.max_len
        )));
    }
    for seq in batch {
        if seq.len() != m {
            return Err(Error::InvalidInput(format!(
                "ragged batch: lengths {m} and {}",
                seq.len()
            )));
        }
        if let Some(bad) = seq.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of vocabulary (V={})",
                config.vocab_size
            )));
        }
    }
    Ok(m)
}

/// Embedded input `x = E[tokens] + positions (+ perturbation)` as `[b*m, n]`.
pub fn embed(
    g: &mut Graph,
    vars: &EncoderVars,
    config: &EncoderConfig,
    batch: &[&[u32]],
    perturbation: Option<NodeId>,
) -> Result<(NodeId, usize)> {
    let m = validate_batch(config, batch)?;
    let n = config.dim;
    let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
    let mut x = g.gather_rows(vars.embedding, &ids)?;
    if config.position_encoding {
        let mut pe = Vec::with_capacity(ids.len() * n);
        for _ in batch {
            for pos in 0..m {
                pe.extend(position_encoding(pos, n));
            }
        }
        let pe = g.constant(Tensor::matrix(ids.len(), n, pe)?);
        x = g.add(x, pe)?;
    }
    if let Some(p) = perturbation {
        let shape = g.value(p).dims2();
        if shape != (ids.len(), n) {
            return Err(Error::shape(
                "embed",
                format!("perturbation {shape:?} vs embedded input ({}, {n})", ids.len()),
            ));
        }
        x = g.add(x, p)?;
    }
    Ok((x, m))
}

/// Runs the residual blocks over an embedded `[b*m, n]` input.
pub fn run_blocks(g: &mut Graph, vars: &EncoderVars, config: &EncoderConfig, x: NodeId, m: usize) -> Result<NodeId> {
    let scale = 1.0 / (config.dim as f64).sqrt();
    let mut x = x;
    for b in &vars.blocks {
        let h = g.layer_norm(x, b.ln1_gain, b.ln1_bias, LAYER_NORM_EPS)?;
        let q = g.matmul(h, b.wq)?;
        let k = g.matmul(h, b.wk)?;
        let v = g.matmul(h, b.wv)?;
        let scores = g.block_matmul_bt(q, k, m)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores)?;
        let ctx = g.block_matmul(attn, v, m)?;
        let out = g.matmul(ctx, b.wo)?;
        x = g.add(x, out)?;

        let h = g.layer_norm(x, b.ln2_gain, b.ln2_bias, LAYER_NORM_EPS)?;
        let f = g.matmul(h, b.w1)?;
        let f = g.add_row_bias(f, b.b1)?;
        let f = g.tanh(f)?;
        let f = g.matmul(f, b.w2)?;
        let f = g.add_row_bias(f, b.b2)?;
        x = g.add(x, f)?;
    }
    Ok(x)
}

/// Pools `[b*m, n]` hidden states to `[b, n]`.
pub fn pool(g: &mut Graph, config: &EncoderConfig, hidden: NodeId, batch_size: usize, m: usize) -> Result<NodeId> {
    match config.pooling {
        Pooling::FirstToken => {
            let rows: Vec<usize> = (0..batch_size).map(|i| i * m).collect();
            g.gather_rows(hidden, &rows)
        }
        Pooling::Mean => {
            let mut avg = vec![0.0; batch_size * batch_size * m];
            for i in 0..batch_size {
                for p in 0..m {
                    avg[i * batch_size * m + i * m + p] = 1.0 / m as f64;
                }
            }
            let avg = g.constant(Tensor::matrix(batch_size, batch_size * m, avg)?);
            g.matmul(avg, hidden)
        }
    }
}

/// Pooled representations `[b, n]` for a batch of equal-length sequences.
pub fn encode_batch(
    g: &mut Graph,
    vars: &EncoderVars,
    config: &EncoderConfig,
    batch: &[&[u32]],
    perturbation: Option<NodeId>,
) -> Result<NodeId> {
    let (x, m) = embed(g, vars, config, batch, perturbation)?;
    let h = run_blocks(g, vars, config, x, m)?;
    pool(g, config, h, batch.len(), m)
}

/// Representation of one token sequence.
pub fn encode(params: &EncoderParams, tokens: &[u32]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    g.begin_forward_pass();
    let vars = params.register(&mut g, false);
    let r = encode_batch(&mut g, &vars, &params.config, &[tokens], None)?;
    Ok(g.value(r).values().to_vec())
}

/// Representation with `perturbation` (`[m, n]`) added to the embedded input
/// before the first block.
pub fn embed_then_encode(params: &EncoderParams, tokens: &[u32], perturbation: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    g.begin_forward_pass();
    let vars = params.register(&mut g, false);
    let p = g.constant(perturbation.clone());
    let r = encode_batch(&mut g, &vars, &params.config, &[tokens], Some(p))?;
    Ok(g.value(r).values().to_vec())
}

/// Representations of many sequences, computed in chunks of `chunk`.
pub fn encode_many(params: &EncoderParams, seqs: &[&[u32]], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        g.begin_forward_pass();
        let vars = params.register(&mut g, false);
        let r = encode_batch(&mut g, &vars, &params.config, part, None)?;
        let v = g.value(r);
        out.extend((0..part.len()).map(|i| v.row(i).to_vec()));
    }
    Ok(out)
}

//! Straight-line reference implementation of the encoder + head forward pass,
//! generic over plain floats and forward-mode dual numbers. It reads the
//! parameters by name and shares no code with the graph engine.

#![allow(dead_code)]

use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};

use trusttune::model::{EncoderConfig, EncoderParams, HeadConfig, HeadParams, Pooling};
use trusttune::rng::{stream, Stream};

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn c(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Scalar for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Value and one directional derivative.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}
impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}
impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}
impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual { v: self.v / o.v, d: (self.d * o.v - self.v * o.d) / (o.v * o.v) }
    }
}
impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

impl Scalar for Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual { v: e, d: self.d * e }
    }
    fn ln(self) -> Self {
        Dual { v: self.v.ln(), d: self.d / self.v }
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual { v: t, d: self.d * (1.0 - t * t) }
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual { v: s, d: self.d / (2.0 * s) }
    }
}

type Mat<S> = Vec<Vec<S>>;

fn lookup(enc: &EncoderParams, head: &HeadParams) -> HashMap<String, (usize, usize, Vec<f64>)> {
    enc.named_tensors()
        .into_iter()
        .chain(head.named_tensors())
        .map(|(name, t)| {
            let (r, c) = if t.shape().len() == 2 { (t.shape()[0], t.shape()[1]) } else { (1, t.numel()) };
            (name, (r, c, t.values().to_vec()))
        })
        .collect()
}

fn mat<S: Scalar>(p: &HashMap<String, (usize, usize, Vec<f64>)>, name: &str) -> Mat<S> {
    let (r, c, v) = &p[name];
    (0..*r).map(|i| (0..*c).map(|j| S::c(v[i * c + j])).collect()).collect()
}

fn vec_of<S: Scalar>(p: &HashMap<String, (usize, usize, Vec<f64>)>, name: &str) -> Vec<S> {
    p[name].2.iter().map(|&v| S::c(v)).collect()
}

fn matmul<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| {
                    let mut acc = S::c(0.0);
                    for (k, &x) in row.iter().enumerate() {
                        acc = acc + x * b[k][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn layer_norm<S: Scalar>(x: &Mat<S>, gain: &[S], bias: &[S]) -> Mat<S> {
    x.iter()
        .map(|row| {
            let n = S::c(row.len() as f64);
            let mut mean = S::c(0.0);
            for &v in row {
                mean = mean + v;
            }
            mean = mean / n;
            let mut var = S::c(0.0);
            for &v in row {
                var = var + (v - mean) * (v - mean);
            }
            var = var / n;
            let rs = S::c(1.0) / (var + S::c(1e-5)).sqrt();
            row.iter()
                .zip(gain.iter().zip(bias))
                .map(|(&v, (&g, &b))| (v - mean) * rs * g + b)
                .collect()
        })
        .collect()
}

pub fn softmax<S: Scalar>(x: &[S]) -> Vec<S> {
    let max = x.iter().map(|v| v.val()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = x.iter().map(|&v| (v - S::c(max)).exp()).collect();
    let mut z = S::c(0.0);
    for &v in &e {
        z = z + v;
    }
    e.into_iter().map(|v| v / z).collect()
}

fn positions(m: usize, n: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|pos| {
            (0..n)
                .map(|j| {
                    let angle = pos as f64 / 10000f64.powf(2.0 * (j / 2) as f64 / n as f64);
                    if j % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// Class probabilities for one sequence with `delta` (`[m][n]`) added to
/// the embedded input.
pub fn probs<S: Scalar>(enc: &EncoderParams, head: &HeadParams, tokens: &[u32], delta: &[Vec<S>]) -> Vec<S> {
    let p = lookup(enc, head);
    let cfg = &enc.config;
    let (m, n) = (tokens.len(), cfg.dim);
    let emb: Mat<S> = mat(&p, "embedding");
    let pe = positions(m, n);
    let mut x: Mat<S> = (0..m)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let base = emb[tokens[i] as usize][j];
                    let base = if cfg.position_encoding { base + S::c(pe[i][j]) } else { base };
                    base + delta[i][j]
                })
                .collect()
        })
        .collect();
    for b in 0..cfg.blocks {
        let k = |f: &str| format!("blocks.{b}.{f}");
        let h = layer_norm(&x, &vec_of::<S>(&p, &k("ln1_gain")), &vec_of::<S>(&p, &k("ln1_bias")));
        let q = matmul(&h, &mat(&p, &k("wq")));
        let kk = matmul(&h, &mat(&p, &k("wk")));
        let v = matmul(&h, &mat(&p, &k("wv")));
        let scale = S::c(1.0 / (n as f64).sqrt());
        let mut ctx = vec![vec![S::c(0.0); n]; m];
        for i in 0..m {
            let scores: Vec<S> = (0..m)
                .map(|j| {
                    let mut s = S::c(0.0);
                    for t in 0..n {
                        s = s + q[i][t] * kk[j][t];
                    }
                    s * scale
                })
                .collect();
            let a = softmax(&scores);
            for j in 0..m {
                for t in 0..n {
                    ctx[i][t] = ctx[i][t] + a[j] * v[j][t];
                }
            }
        }
        let att = matmul(&ctx, &mat(&p, &k("wo")));
        for i in 0..m {
            for t in 0..n {
                x[i][t] = x[i][t] + att[i][t];
            }
        }
        let h = layer_norm(&x, &vec_of::<S>(&p, &k("ln2_gain")), &vec_of::<S>(&p, &k("ln2_bias")));
        let b1 = vec_of::<S>(&p, &k("b1"));
        let b2 = vec_of::<S>(&p, &k("b2"));
        let f: Mat<S> = matmul(&h, &mat(&p, &k("w1")))
            .into_iter()
            .map(|row| row.into_iter().zip(&b1).map(|(v, &b)| (v + b).tanh()).collect())
            .collect();
        let f = matmul(&f, &mat(&p, &k("w2")));
        for i in 0..m {
            for t in 0..n {
                x[i][t] = x[i][t] + f[i][t] + b2[t];
            }
        }
    }
    let mut r: Vec<S> = match cfg.pooling {
        Pooling::FirstToken => x[0].clone(),
        Pooling::Mean => (0..n)
            .map(|t| {
                let mut s = S::c(0.0);
                for row in &x {
                    s = s + row[t];
                }
                s / S::c(m as f64)
            })
            .collect(),
    };
    let last = head.layers.len() - 1;
    for (li, layer) in head.layers.iter().enumerate() {
        let mut w: Mat<S> = mat(&p, &format!("head.{li}.weight"));
        if let Some(st) = &layer.spectral {
            let mut sigma = 0.0;
            for (i, row) in w.iter().enumerate() {
                for (j, x) in row.iter().enumerate() {
                    sigma += st.u[i] * x.val() * st.v[j];
                }
            }
            w = w.into_iter().map(|row| row.into_iter().map(|x| x / S::c(sigma)).collect()).collect();
        }
        let bias = vec_of::<S>(&p, &format!("head.{li}.bias"));
        let out = matmul(&vec![r], &w).remove(0);
        r = out
            .into_iter()
            .zip(&bias)
            .map(|(v, &b)| if li < last { (v + b).tanh() } else { v + b })
            .collect();
    }
    softmax(&r)
}

pub fn sym_kl<S: Scalar>(p: &[S], q: &[S]) -> S {
    let mut s = S::c(0.0);
    for (&a, &b) in p.iter().zip(q) {
        s = s + a * (a / b).ln() + b * (b / a).ln();
    }
    s
}

/// Hand-sized model: 3-token vocabulary, 2-dimensional states, 2-token inputs.
pub fn hand_model(spectral: bool) -> (EncoderParams, HeadParams) {
    let cfg = EncoderConfig {
        vocab_size: 3,
        dim: 2,
        blocks: 1,
        ffn_dim: 3,
        max_len: 2,
        pooling: Pooling::Mean,
        position_encoding: true,
    };
    let mut rng = stream(11, Stream::Init);
    let mut enc = EncoderParams::init(cfg, &mut rng).unwrap();
    for (k, t) in enc.tensors_mut().into_iter().enumerate() {
        for (j, v) in t.values_mut().iter_mut().enumerate() {
            *v += 0.3 * (((k * 5 + j * 3) % 7) as f64 - 3.0) / 3.0;
        }
    }
    let head_cfg = HeadConfig {
        spectral,
        ..HeadConfig::new(2, 2)
    };
    let mut head = HeadParams::init(&head_cfg, &mut rng).unwrap();
    for (k, t) in head.tensors_mut().into_iter().enumerate() {
        for (j, v) in t.values_mut().iter_mut().enumerate() {
            *v += 0.2 * (((k + j) % 3) as f64 - 1.0);
        }
    }
    if spectral {
        head.power_step(3).unwrap();
    }
    (enc, head)
}

/// Small model used for gradient checks of whole objectives: large enough
/// that every code path is generic, small enough for finite differences.
pub fn small_model(spectral: bool) -> (EncoderParams, HeadParams) {
    let cfg = EncoderConfig {
        vocab_size: 8,
        dim: 4,
        blocks: 1,
        ffn_dim: 5,
        max_len: 4,
        pooling: Pooling::FirstToken,
        position_encoding: true,
    };
    let mut rng = stream(3, Stream::Init);
    let mut enc = EncoderParams::init(cfg, &mut rng).unwrap();
    for (k, t) in enc.tensors_mut().into_iter().enumerate() {
        for (j, v) in t.values_mut().iter_mut().enumerate() {
            *v += 0.05 * (((k * 7 + j * 3) % 11) as f64 - 5.0) / 5.0;
        }
    }
    let head_cfg = HeadConfig {
        spectral,
        ..HeadConfig::new(4, 3)
    };
    let mut head = HeadParams::init(&head_cfg, &mut rng).unwrap();
    if spectral {
        head.power_step(5).unwrap();
    }
    (enc, head)
}

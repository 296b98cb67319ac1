//! Classification head `g: R^p -> R^q`: a stack of linear layers with tanh
//! between them and a softmax on top, optionally spectrally normalized.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spectral::{power_iterate, SpectralState};
use crate::autodiff::{softmax_in_place, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Power-iteration rounds per optimizer step while training.
pub const TRAIN_SPECTRAL_ITERS: usize = 1;
/// Power-iteration rounds on the evaluation copy.
pub const EVAL_SPECTRAL_ITERS: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    pub layers: usize,
    pub spectral: bool,
}

impl HeadConfig {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: input_dim,
            classes,
            layers: 2,
            spectral: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.classes < 2 {
            return Err(Error::Config(format!(
                "head needs positive dims and >= 2 classes, got {self:?}"
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("head needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `[in, out]`, applied as `x W + b`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub spectral: Option<SpectralState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub layers: Vec<LinearLayer>,
    pub spectral_enabled: bool,
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    layers: Vec<(NodeId, NodeId)>,
}

impl HeadVars {
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl HeadParams {
    pub fn init(config: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim];
        dims.extend(std::iter::repeat_n(config.hidden_dim, config.layers - 1));
        dims.push(config.classes);
        let mut layers = Vec::with_capacity(config.layers);
        for pair in dims.windows(2) {
            let (i, o) = (pair[0], pair[1]);
            let dist = Normal::new(0.0, 1.0 / (i as f64).sqrt()).expect("positive std");
            let w = (0..i * o).map(|_| dist.sample(rng)).collect();
            let state_seed = rng.next_u64();
            layers.push(LinearLayer {
                weight: Tensor::matrix(i, o, w)?,
                bias: Tensor::zeros(&[o]),
                spectral: config.spectral.then(|| SpectralState::seeded(i, state_seed)),
            });
        }
        Self::from_layers(layers, config.spectral)
    }

    /// Builds a head from explicit layers. With `spectral` set, layers without
    /// a state get one seeded from their position.
    pub fn from_layers(mut layers: Vec<LinearLayer>, spectral: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("head needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::shape("head", format!("layer {k} output does not feed layer {}", k + 1)));
            }
        }
        for (k, l) in layers.iter_mut().enumerate() {
            if l.bias.numel() != l.weight.cols() {
                return Err(Error::shape("head", format!("layer {k} bias/weight mismatch")));
            }
            if spectral {
                let st = l
                    .spectral
                    .get_or_insert_with(|| SpectralState::seeded(l.weight.rows(), k as u64));
                power_iterate(&l.weight, st, 0)?;
            } else {
                l.spectral = None;
            }
        }
        Ok(Self {
            layers,
            spectral_enabled: spectral,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("head.{i}.weight"), &l.weight), (format!("head.{i}.bias"), &l.bias)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Advances every persistent power-iteration state by `iters` rounds.
    pub fn power_step(&mut self, iters: usize) -> Result<()> {
        for l in &mut self.layers {
            if let Some(st) = &mut l.spectral {
                power_iterate(&l.weight, st, iters)?;
            }
        }
        Ok(())
    }

    /// Copy used for evaluation: spectral states refined without touching
    /// the training state.
    pub fn eval_copy(&self) -> Result<Self> {
        let mut h = self.clone();
        h.power_step(EVAL_SPECTRAL_ITERS)?;
        Ok(h)
    }

    /// Weights as used in the forward pass (`W / sigma` when normalized).
    pub fn effective_weights(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .map(|l| match &l.spectral {
                Some(st) => {
                    let s = st.estimate(&l.weight);
                    Tensor::new(l.weight.shape().to_vec(), l.weight.values().iter().map(|x| x / s).collect())
                        .expect("same shape")
                }
                None => l.weight.clone(),
            })
            .collect()
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> HeadVars {
        let layers = self
            .layers
            .iter()
            .map(|l| (g.leaf(l.weight.clone(), trainable), g.leaf(l.bias.clone(), trainable)))
            .collect();
        HeadVars { layers }
    }

    /// Builds handles from ids given in [`HeadParams::named_tensors`] order.
    pub fn vars_from(&self, ids: &[NodeId]) -> HeadVars {
        assert_eq!(ids.len(), 2 * self.layers.len(), "head id count");
        HeadVars {
            layers: ids.chunks(2).map(|c| (c[0], c[1])).collect(),
        }
    }
}

/// Pre-softmax scores `[b, q]` for pooled representations `[b, p]`. With
/// spectral normalization each weight is divided by `u^T W v`, and the
/// gradient flows through that estimate as a function of `W`.
pub fn head_logits(g: &mut Graph, head: &HeadParams, vars: &HeadVars, repr: NodeId) -> Result<NodeId> {
    let last = head.layers.len() - 1;
    let mut h = repr;
    for (k, (layer, &(w, b))) in head.layers.iter().zip(&vars.layers).enumerate() {
        let w_eff = match &layer.spectral {
            Some(st) => {
                let (r, c) = layer.weight.dims2();
                let u = g.constant(Tensor::matrix(1, r, st.u.clone())?);
                let v = g.constant(Tensor::matrix(c, 1, st.v.clone())?);
                let uw = g.matmul(u, w)?;
                let sigma = g.matmul(uw, v)?;
                g.div_by_scalar(w, sigma)?
            }
            None => w,
        };
        h = g.matmul(h, w_eff)?;
        h = g.add_row_bias(h, b)?;
        if k < last {
            h = g.tanh(h)?;
        }
    }
    Ok(h)
}

/// Pre-softmax scores for one representation, outside any graph.
pub fn head_scores(head: &HeadParams, repr: &[f64]) -> Result<Vec<f64>> {
    if repr.len() != head.input_dim() {
        return Err(Error::shape(
            "head_forward",
            format!("representation length {} vs head input {}", repr.len(), head.input_dim()),
        ));
    }
    if repr.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("head_forward", "non-finite representation"));
    }
    let weights = head.effective_weights();
    let last = head.layers.len() - 1;
    let mut h = repr.to_vec();
    for (k, (layer, w)) in head.layers.iter().zip(&weights).enumerate() {
        let (r, c) = w.dims2();
        let mut out = crate::tensor::matmul_raw(&h, w.values(), 1, r, c);
        out.iter_mut().zip(layer.bias.values()).for_each(|(o, b)| *o += b);
        if k < last {
            out.iter_mut().for_each(|o| *o = o.tanh());
        }
        h = out;
    }
    Ok(h)
}

/// Class probabilities for one representation.
pub fn head_forward(head: &HeadParams, repr: &[f64]) -> Result<Vec<f64>> {
    let mut p = head_scores(head, repr)?;
    softmax_in_place(&mut p);
    Ok(p)
}

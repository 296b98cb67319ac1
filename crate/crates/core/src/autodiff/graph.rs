//! Tape-style compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep. Every op checks
//! its input shapes and that its output is finite.
//!
//! The graph also carries the pass counters used for cost accounting: a
//! model-level forward sweep calls [`Graph::begin_forward_pass`] and every
//! backward sweep increments the backward counter.

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward/backward pass totals and the derived forward-pass-equivalent cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PassCounters {
    pub forward: u64,
    pub backward: u64,
}

impl PassCounters {
    pub fn new(forward: u64, backward: u64) -> Self {
        Self { forward, backward }
    }

    /// One backward pass costs two forward passes.
    pub fn xfp(&self) -> u64 {
        self.forward + 2 * self.backward
    }
}

impl std::ops::AddAssign for PassCounters {
    fn add_assign(&mut self, rhs: Self) {
        self.forward += rhs.forward;
        self.backward += rhs.backward;
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Scale(NodeId, f64),
    DivByScalar(NodeId, NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Log(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    PickCols(NodeId, Vec<usize>),
    BlockMatMulBt(NodeId, NodeId, usize),
    BlockMatMul(NodeId, NodeId, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::DivByScalar(..) => "div_by_scalar",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::PickCols(..) => "pick_cols",
            Op::BlockMatMulBt(..) => "block_matmul_bt",
            Op::BlockMatMul(..) => "block_matmul",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation record.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    counters: PassCounters,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> PassCounters {
        self.counters
    }

    /// Marks the start of one full model forward pass.
    pub fn begin_forward_pass(&mut self) {
        self.counters.forward += 1;
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> NodeId {
        t.clear_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copies a node's value into a fresh constant (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::numeric(
                op.name(),
                format!("non-finite output of shape {:?}", value.shape()),
            ));
        }
        let requires_grad = self.inputs_of(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::DivByScalar(a, b)
            | Op::BlockMatMulBt(a, b, _)
            | Op::BlockMatMul(a, b, _) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Log(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, _)
            | Op::PickCols(a, _) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dims2()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, k) = self.dims(a);
        let (k2, c) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {r}x{k} * {k2}x{c}"),
            ));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), r, k, c);
        self.push(Op::MatMul(a, b), Tensor::matrix(r, c, out)?)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a).transpose();
        self.push(Op::Transpose(a), t)
    }

    fn check_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.check_same(op.name(), a, b)?;
        let va = self.value(a);
        let vals = va
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), vals)?;
        self.push(op, t)
    }

    fn map(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.values().iter().map(|x| f(*x)).collect())?;
        self.push(op, t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// `x[r, c] + bias[c]` for every row.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        let vb = self.value(bias);
        if vb.numel() != c {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias len {} vs {c} columns", vb.numel()),
            ));
        }
        let b = vb.values().to_vec();
        let vx = self.value(x);
        let mut out = vx.values().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += b[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(Op::AddRowBias(x, bias), t)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.map(Op::Scale(a, s), a, |x| x * s)
    }

    /// `x / s` where `s` is a one-element node.
    pub fn div_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s).item().ok_or_else(|| {
            Error::shape("div_by_scalar", format!("divisor shape {:?}", self.value(s).shape()))
        })?;
        if sv == 0.0 {
            return Err(Error::numeric("div_by_scalar", "division by zero"));
        }
        self.map(Op::DivByScalar(x, s), x, |v| v / sv)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(Op::Tanh(a), a, f64::tanh)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (r, c) = va.dims2();
        let mut out = va.values().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(va.shape().to_vec(), out)?;
        self.push(Op::Softmax(a), t)
    }

    /// Log-softmax over the last axis via log-sum-exp.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (r, c) = va.dims2();
        let mut out = va.values().to_vec();
        for i in 0..r {
            log_softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(va.shape().to_vec(), out)?;
        self.push(Op::LogSoftmax(a), t)
    }

    /// `ln(max(x, floor))`.
    pub fn log(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.map(Op::Log(a, floor), a, |x| x.max(floor).ln())
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).values().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s = v.values().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// `[r, c] -> [r]`, summing each row.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (r, c) = va.dims2();
        let out = (0..r)
            .map(|i| va.values()[i * c..(i + 1) * c].iter().sum())
            .collect();
        self.push(Op::SumRows(a), Tensor::vector(out)?)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != c || b.numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {} / bias {} vs {c} columns", g.numel(), b.numel()),
            ));
        }
        let (g, b) = (g.values().to_vec(), b.values().to_vec());
        let vx = self.value(x);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &vx.values()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            t,
        )
    }

    /// Row gather; embedding lookup is `gather_rows(table, ids)`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {r} rows"),
            ));
        }
        let vt = self.value(table).values();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&vt[i * c..(i + 1) * c]);
        }
        self.push(Op::GatherRows(table, ids.to_vec()), Tensor::matrix(ids.len(), c, out)?)
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch {pc} vs {c}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).values());
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::matrix(rows, c, out)?)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let vals = self.value(x).values()[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows(x, start), Tensor::matrix(len, c, vals)?)
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if cols.len() != r {
            return Err(Error::shape(
                "pick_cols",
                format!("{} indices for {r} rows", cols.len()),
            ));
        }
        if let Some(bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::shape("pick_cols", format!("column {bad} >= {c}")));
        }
        let v = self.value(x).values();
        let out = cols.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        self.push(Op::PickCols(x, cols.to_vec()), Tensor::vector(out)?)
    }

    /// Batched `a_k * b_kᵀ` over consecutive row blocks of height `block`:
    /// `a[nb*block, d]`, `b[nb*block, d]` -> `[nb*block, block]`.
    pub fn block_matmul_bt(&mut self, a: NodeId, b: NodeId, block: usize) -> Result<NodeId> {
        let (ra, d) = self.dims(a);
        let (rb, db) = self.dims(b);
        if block == 0 || ra != rb || d != db || ra % block != 0 {
            return Err(Error::shape(
                "block_matmul_bt",
                format!("{ra}x{d} vs {rb}x{db}, block {block}"),
            ));
        }
        let (va, vb) = (self.value(a).values(), self.value(b).values());
        let mut out = vec![0.0; ra * block];
        for blk in 0..ra / block {
            let base = blk * block;
            for i in 0..block {
                let arow = &va[(base + i) * d..(base + i + 1) * d];
                for j in 0..block {
                    let brow = &vb[(base + j) * d..(base + j + 1) * d];
                    out[(base + i) * block + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        self.push(Op::BlockMatMulBt(a, b, block), Tensor::matrix(ra, block, out)?)
    }

    /// Batched `a_k * b_k`: `a[nb*block, block]`, `b[nb*block, c]` -> `[nb*block, c]`.
    pub fn block_matmul(&mut self, a: NodeId, b: NodeId, block: usize) -> Result<NodeId> {
        let (ra, ca) = self.dims(a);
        let (rb, c) = self.dims(b);
        if block == 0 || ca != block || ra != rb || ra % block != 0 {
            return Err(Error::shape(
                "block_matmul",
                format!("{ra}x{ca} vs {rb}x{c}, block {block}"),
            ));
        }
        let (va, vb) = (self.value(a).values(), self.value(b).values());
        let mut out = vec![0.0; ra * c];
        for blk in 0..ra / block {
            let base = blk * block;
            let prod = matmul_raw(
                &va[base * block..(base + block) * block],
                &vb[base * c..(base + block) * c],
                block,
                block,
                c,
            );
            out[base * c..(base + block) * c].copy_from_slice(&prod);
        }
        self.push(Op::BlockMatMul(a, b, block), Tensor::matrix(ra, c, out)?)
    }

    // ----------------------------------------------------------- backward

    fn sweep(&self, loss: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        if self.counters.forward == 0 {
            return Err(Error::Graph("backward called before any forward pass".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {}", loss.0)));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(up);
                continue;
            }
            self.propagate(node, &up, &mut grads);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let send = |grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = self.dims(*a);
                let c = self.dims(*b).1;
                if self.nodes[a.0].requires_grad {
                    // dA = dY * Bᵀ
                    let bt = self.value(*b).transpose();
                    send(grads, *a, matmul_raw(up, bt.values(), r, c, k));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ * dY
                    let at = self.value(*a).transpose();
                    send(grads, *b, matmul_raw(at.values(), up, k, r, c));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = out.dims2();
                let t = Tensor::matrix(r, c, up.to_vec()).expect("same shape").transpose();
                send(grads, *a, t.into_values());
            }
            Op::Add(a, b) => {
                send(grads, *a, up.to_vec());
                send(grads, *b, up.to_vec());
            }
            Op::Sub(a, b) => {
                send(grads, *a, up.to_vec());
                send(grads, *b, up.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).values(), self.value(*b).values());
                send(grads, *a, up.iter().zip(vb).map(|(g, y)| g * y).collect());
                send(grads, *b, up.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::AddRowBias(x, bias) => {
                let (r, c) = out.dims2();
                send(grads, *x, up.to_vec());
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += up[i * c + j];
                    }
                }
                send(grads, *bias, gb);
            }
            Op::Scale(a, s) => send(grads, *a, up.iter().map(|g| g * s).collect()),
            Op::DivByScalar(x, s) => {
                let sv = self.value(*s).values()[0];
                send(grads, *x, up.iter().map(|g| g / sv).collect());
                let vx = self.value(*x).values();
                let ds = -up.iter().zip(vx).map(|(g, v)| g * v).sum::<f64>() / (sv * sv);
                send(grads, *s, vec![ds]);
            }
            Op::Tanh(a) => {
                send(
                    grads,
                    *a,
                    up.iter().zip(out.values()).map(|(g, y)| g * (1.0 - y * y)).collect(),
                );
            }
            Op::Softmax(a) => {
                let (r, c) = out.dims2();
                let y = out.values();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = up[row.clone()].iter().zip(&y[row.clone()]).map(|(u, v)| u * v).sum();
                    for j in row {
                        g[j] = y[j] * (up[j] - dot);
                    }
                }
                send(grads, *a, g);
            }
            Op::LogSoftmax(a) => {
                let (r, c) = out.dims2();
                let y = out.values();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let total: f64 = up[row.clone()].iter().sum();
                    for j in row {
                        g[j] = up[j] - y[j].exp() * total;
                    }
                }
                send(grads, *a, g);
            }
            Op::Log(a, floor) => {
                let va = self.value(*a).values();
                send(
                    grads,
                    *a,
                    up.iter()
                        .zip(va)
                        .map(|(g, x)| if *x > *floor { g / x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sum(a) => send(grads, *a, vec![up[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(grads, *a, vec![up[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let (r, c) = self.dims(*a);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = up[i]);
                }
                send(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = out.dims2();
                let gv = self.value(*gain).values();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        let k = i * c + j;
                        dgain[j] += up[k] * xhat[k];
                        dbias[j] += up[k];
                        let d = up[k] * gv[j];
                        sum_d += d;
                        sum_dh += d * xhat[k];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let k = i * c + j;
                        let d = up[k] * gv[j];
                        dx[k] = rstd[i] * (d - sum_d / n - xhat[k] * sum_dh / n);
                    }
                }
                send(grads, *x, dx);
                send(grads, *gain, dgain);
                send(grads, *bias, dbias);
            }
            Op::GatherRows(table, ids) => {
                let (r, c) = self.dims(*table);
                let mut g = vec![0.0; r * c];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..c {
                        g[i * c + j] += up[k * c + j];
                    }
                }
                send(grads, *table, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(grads, p, up[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let (r, c) = self.dims(*x);
                let mut g = vec![0.0; r * c];
                g[start * c..start * c + up.len()].copy_from_slice(up);
                send(grads, *x, g);
            }
            Op::PickCols(x, cols) => {
                let (r, c) = self.dims(*x);
                let mut g = vec![0.0; r * c];
                for (i, &j) in cols.iter().enumerate() {
                    g[i * c + j] = up[i];
                }
                send(grads, *x, g);
            }
            Op::BlockMatMulBt(a, b, block) => {
                let block = *block;
                let (rows, d) = self.dims(*a);
                let (va, vb) = (self.value(*a).values(), self.value(*b).values());
                let mut ga = vec![0.0; rows * d];
                let mut gb = vec![0.0; rows * d];
                for blk in 0..rows / block {
                    let base = blk * block;
                    for i in 0..block {
                        for j in 0..block {
                            let u = up[(base + i) * block + j];
                            if u == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                ga[(base + i) * d + t] += u * vb[(base + j) * d + t];
                                gb[(base + j) * d + t] += u * va[(base + i) * d + t];
                            }
                        }
                    }
                }
                send(grads, *a, ga);
                send(grads, *b, gb);
            }
            Op::BlockMatMul(a, b, block) => {
                let block = *block;
                let (rows, c) = self.dims(*b);
                let (va, vb) = (self.value(*a).values(), self.value(*b).values());
                let mut ga = vec![0.0; rows * block];
                let mut gb = vec![0.0; rows * c];
                for blk in 0..rows / block {
                    let base = blk * block;
                    for i in 0..block {
                        for j in 0..block {
                            let av = va[(base + i) * block + j];
                            let mut acc = 0.0;
                            for t in 0..c {
                                let u = up[(base + i) * c + t];
                                acc += u * vb[(base + j) * c + t];
                                gb[(base + j) * c + t] += av * u;
                            }
                            ga[(base + i) * block + j] = acc;
                        }
                    }
                }
                send(grads, *a, ga);
                send(grads, *b, gb);
            }
        }
    }

    /// Reverse sweep from a scalar loss; accumulates `dLoss/dLeaf` into
    /// every trainable leaf reached.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let grads = self.sweep(loss)?;
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[idx];
                if matches!(node.op, Op::Leaf) {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        self.counters.backward += 1;
        Ok(())
    }

    /// Reverse sweep returning gradients for the given leaves only; nothing
    /// is accumulated on the graph. Unreached leaves get zeros.
    pub fn gradients_wrt(&mut self, loss: NodeId, leaves: &[NodeId]) -> Result<Vec<Vec<f64>>> {
        let mut grads = self.sweep(loss)?;
        self.counters.backward += 1;
        Ok(leaves
            .iter()
            .map(|id| {
                grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; self.value(*id).numel()])
            })
            .collect())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Forward and backward totals of a graph plus the forward-pass equivalent.
pub fn pass_counters(graph: &Graph) -> (u64, u64, u64) {
    let c = graph.counters();
    (c.forward, c.backward, c.xfp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let x = g.constant(t(&[2, 3], &[1., -2., 3.5, 0.25, 7., -1.]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).values(), g.value(x).values());
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0., 0.]));
        let s = g.softmax(a).unwrap();
        assert_eq!(g.value(s).values(), &[0.5, 0.5]);
        let b = g.constant(t(&[2], &[2f64.ln(), 0.]));
        let s = g.softmax(b).unwrap();
        assert!((g.value(s).values()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s).values()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("2x3"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1e300]));
        let b = g.mul(a, a);
        assert!(matches!(b, Err(Error::Numeric { op: "mul", .. })));
    }

    #[test]
    fn sum_gives_ones_and_square_gives_2x() {
        let mut g = Graph::new();
        g.begin_forward_pass();
        let x = g.param(t(&[3], &[1., 2., 3.]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1., 1.]);

        let mut g = Graph::new();
        g.begin_forward_pass();
        let x = g.param(t(&[1], &[3.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.]);
    }

    #[test]
    fn backward_preconditions() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let s = g.sum(x).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
        g.begin_forward_pass();
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
        g.backward(s).unwrap();
        assert_eq!(pass_counters(&g), (1, 1, 3));
    }

    #[test]
    fn gradients_wrt_does_not_accumulate() {
        let mut g = Graph::new();
        g.begin_forward_pass();
        let x = g.param(t(&[2], &[1., 2.]));
        let y = g.param(t(&[2], &[3., 4.]));
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p).unwrap();
        let gx = g.gradients_wrt(s, &[x]).unwrap();
        assert_eq!(gx[0], vec![3., 4.]);
        assert!(g.grad(x).is_none() && g.grad(y).is_none());
        assert_eq!(g.counters().backward, 1);
    }

    #[test]
    fn xfp_rule() {
        assert_eq!(PassCounters::new(1, 1).xfp(), 3);
        assert_eq!(PassCounters::new(2, 1).xfp(), 4);
        assert_eq!(PassCounters::new(3, 3).xfp(), 9);
    }
}

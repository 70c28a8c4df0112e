//! Reverse-mode tape.
//!
//! Every op appends a node holding its inputs and, depending on the
//! [`Retention`] mode, its output. In `Discard` mode outputs are
//! tombstoned as soon as they are produced; the caller's [`Var`] handles
//! keep values alive only as long as the forward code needs them. A
//! tombstoned node can be re-armed with [`Graph::pin`]. Backward refuses
//! to cross a tombstone rather than produce wrong gradients.

use std::collections::HashMap;
use std::sync::Arc;

use super::rng;
use super::{axis_split, matmul_nt, matmul_raw, matmul_tn, Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retention {
    Retain,
    Discard,
}

/// Seed material for dropout masks. Masks are a pure function of
/// `(seed, step, stream, op index within stream, element)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
}

/// Handle to a node's output.
#[derive(Clone, Debug)]
pub struct Var {
    id: usize,
    value: Arc<Tensor>,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Log(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Sum(usize),
    SumAxis { x: usize, axis: usize },
    MaxAxis { x: usize, axis: usize, argmax: Vec<usize> },
    Dropout { x: usize, p: f64, key: u64 },
    Embedding { table: usize, ids: Vec<usize> },
    SumRows { x: usize, rows: Vec<usize> },
    GroupSum { x: usize, groups: Vec<Vec<usize>> },
    SliceCols { x: usize, start: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Unfold { x: usize, window: usize, pad_front: usize },
    Pick { x: usize, index: usize },
    Reshape { x: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Log(_) => "log",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Concat { .. } => "concat",
            Op::Sum(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Dropout { .. } => "dropout",
            Op::Embedding { .. } => "embedding",
            Op::SumRows { .. } => "sum_rows",
            Op::GroupSum { .. } => "group_sum",
            Op::SliceCols { .. } => "slice_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Unfold { .. } => "unfold",
            Op::Pick { .. } => "pick",
            Op::Reshape { .. } => "reshape",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::LogSigmoid(x)
            | Op::Log(x)
            | Op::Sum(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Dropout { x, .. }
            | Op::SumRows { x, .. }
            | Op::GroupSum { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Unfold { x, .. }
            | Op::Pick { x, .. }
            | Op::Reshape { x } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Arc<Tensor>>,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Tensor>,
}

/// A single-threaded computation graph.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    retention: Retention,
    dropout: Option<DropoutKey>,
    stream: u64,
    stream_ops: u64,
    param_leaves: HashMap<ParamId, usize>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new(retention: Retention) -> Self {
        Self {
            nodes: Vec::new(),
            retention,
            dropout: None,
            stream: 0,
            stream_ops: 0,
            param_leaves: HashMap::new(),
        }
    }

    /// Enables dropout (training mode). Without a key, dropout is the identity.
    pub fn with_dropout(mut self, key: DropoutKey) -> Self {
        self.dropout = Some(key);
        self
    }

    pub fn retention(&self) -> Retention {
        self.retention
    }

    pub fn dropout_key(&self) -> Option<DropoutKey> {
        self.dropout
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    /// Starts a new dropout stream. Ops inside a stream are numbered from
    /// zero, so re-running the same forward code under the same stream id
    /// reproduces the same masks in a different graph.
    pub fn begin_stream(&mut self, stream: u64) {
        self.stream = stream;
        self.stream_ops = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalars currently held by the tape (leaves, pinned and retained outputs).
    pub fn retained_scalars(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.value.is_some())
            .map(|n| n.shape.iter().product::<usize>())
            .sum()
    }

    /// Scalars produced by non-leaf nodes, retained or not. Equals the
    /// activation part of [`Self::retained_scalars`] in `Retain` mode.
    pub fn activation_scalars(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.shape.iter().product::<usize>())
            .sum()
    }

    pub fn leaf_scalars(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf))
            .map(|n| n.shape.iter().product::<usize>())
            .sum()
    }

    pub fn is_retained(&self, v: &Var) -> bool {
        self.nodes[v.id].value.is_some()
    }

    // ------------------------------------------------------------------
    // Leaves
    // ------------------------------------------------------------------

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool, param: Option<ParamId>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: value.shape().to_vec(),
            value: Some(Arc::clone(&value)),
            requires_grad,
            param,
            grad: None,
        });
        Var { id, value }
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value), false, None)
    }

    /// Free leaf that accumulates a gradient, readable with [`Self::grad`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value), true, None)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&node) = self.param_leaves.get(&id) {
            let value = Arc::clone(self.nodes[node].value.as_ref().expect("leaves are retained"));
            return Var { id: node, value };
        }
        let var = self.push_leaf(store.shared(id), true, Some(id));
        self.param_leaves.insert(id, var.id);
        var
    }

    /// Keeps `v`'s output on the tape regardless of retention mode.
    pub fn pin(&mut self, v: &Var) {
        self.nodes[v.id].value = Some(Arc::clone(&v.value));
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        let value = Arc::new(value);
        let stored = match self.retention {
            Retention::Retain => Some(Arc::clone(&value)),
            Retention::Discard => None,
        };
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
            value: stored,
            requires_grad,
            param: None,
            grad: None,
        });
        Var { id, value }
    }

    // ------------------------------------------------------------------
    // Ops
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(a.value.data(), b.value.data(), m, k, n);
        Ok(self.push(Op::MatMul(a.id, b.id), Tensor::from_parts(vec![m, n], out)))
    }

    pub fn transpose(&mut self, a: &Var) -> Result<Var> {
        if a.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", a.shape())));
        }
        let t = a.value.transpose2();
        Ok(self.push(Op::Transpose(a.id), t))
    }

    /// Elementwise sum. `b` may have fewer dimensions than `a` when its
    /// shape is a suffix of `a`'s (trailing broadcast, e.g. a bias row).
    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let bd = b.value.data();
        let m = bd.len();
        let data: Vec<f64> = a
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % m])
            .collect();
        Ok(self.push(Op::Add(a.id, b.id), Tensor::from_parts(sa.to_vec(), data)))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", a.shape(), b.shape())));
        }
        let out = a.value.zip(&b.value, |x, y| x * y);
        Ok(self.push(Op::Mul(a.id, b.id), out))
    }

    pub fn scale(&mut self, a: &Var, c: f64) -> Var {
        let out = a.value.map(|x| x * c);
        self.push(Op::Scale(a.id, c), out)
    }

    pub fn relu(&mut self, a: &Var) -> Var {
        let out = a.value.map(|x| x.max(0.0));
        self.push(Op::Relu(a.id), out)
    }

    pub fn sigmoid(&mut self, a: &Var) -> Var {
        let out = a.value.map(sigmoid);
        self.push(Op::Sigmoid(a.id), out)
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, a: &Var) -> Var {
        let out = a.value.map(log_sigmoid);
        self.push(Op::LogSigmoid(a.id), out)
    }

    pub fn log(&mut self, a: &Var) -> Result<Var> {
        if let Some(bad) = a.value.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = a.value.map(f64::ln);
        Ok(self.push(Op::Log(a.id), out))
    }

    fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} for shape {shape:?}")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        Self::check_axis("softmax", a.shape(), axis)?;
        let out = softmax_axis(&a.value, axis, false);
        Ok(self.push(Op::Softmax { x: a.id, axis }, out))
    }

    pub fn log_softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        Self::check_axis("log_softmax", a.shape(), axis)?;
        let out = softmax_axis(&a.value, axis, true);
        Ok(self.push(Op::LogSoftmax { x: a.id, axis }, out))
    }

    pub fn concat(&mut self, parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?
            .shape();
        Self::check_axis("concat", first, axis)?;
        for p in parts {
            let s = p.shape();
            let same_rank = s.len() == first.len();
            if !same_rank || s.iter().zip(first).enumerate().any(|(d, (x, y))| d != axis && x != y) {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
        }
        let (outer, _, inner) = axis_split(first, axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis];
                data.extend_from_slice(&p.value.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        let op = Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        };
        Ok(self.push(op, Tensor::from_parts(shape, data)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: &Var) -> Var {
        let s = a.value.sum();
        self.push(Op::Sum(a.id), Tensor::scalar(s))
    }

    pub fn sum_axis(&mut self, a: &Var, axis: usize) -> Result<Var> {
        Self::check_axis("sum_axis", a.shape(), axis)?;
        let (outer, len, inner) = axis_split(a.shape(), axis);
        let x = a.value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    out[o * inner + j] += x[(o * len + i) * inner + j];
                }
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Op::SumAxis { x: a.id, axis }, Tensor::from_parts(shape, out)))
    }

    /// Maximum along `axis` (the axis is removed). Ties go to the first index.
    pub fn max_axis(&mut self, a: &Var, axis: usize) -> Result<Var> {
        Self::check_axis("max_axis", a.shape(), axis)?;
        let (outer, len, inner) = axis_split(a.shape(), axis);
        let x = a.value.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    let v = x[(o * len + i) * inner + j];
                    let slot = o * inner + j;
                    if v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = i;
                    }
                }
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let op = Op::MaxAxis { x: a.id, axis, argmax };
        Ok(self.push(op, Tensor::from_parts(shape, out)))
    }

    /// Inverted dropout with drop probability `p`. Identity when the graph
    /// is not in training mode or `p == 0`.
    pub fn dropout(&mut self, a: &Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let op_index = self.stream_ops;
        self.stream_ops += 1;
        let Some(dk) = self.dropout else {
            return Ok(a.clone());
        };
        if p == 0.0 {
            return Ok(a.clone());
        }
        let key = rng::combine(&[dk.seed, dk.step, self.stream, op_index]);
        let keep_scale = 1.0 / (1.0 - p);
        let data = a
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if rng::uniform(key, i as u64) < p { 0.0 } else { v * keep_scale })
            .collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.push(Op::Dropout { x: a.id, p, key }, out))
    }

    /// Gathers rows of a `[vocab × d]` table.
    pub fn embedding(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let s = table.shape();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", format!("table {s:?}, {} ids", ids.len())));
        }
        let (v, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(table.value.row(id));
        }
        let op = Op::Embedding {
            table: table.id,
            ids: ids.to_vec(),
        };
        Ok(self.push(op, Tensor::from_parts(vec![ids.len(), d], data)))
    }

    /// Sum of the listed rows of a matrix (duplicates counted, empty gives zeros).
    pub fn sum_rows(&mut self, a: &Var, rows: &[usize]) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::shape("sum_rows", format!("{s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let mut out = vec![0.0; d];
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "rows",
                    index: r,
                    len: n,
                });
            }
            for (o, v) in out.iter_mut().zip(a.value.row(r)) {
                *o += v;
            }
        }
        let op = Op::SumRows {
            x: a.id,
            rows: rows.to_vec(),
        };
        Ok(self.push(op, Tensor::from_parts(vec![d], out)))
    }

    /// Row `i` of the output is the sum of the rows of `a` listed in
    /// `groups[i]`, accumulated in list order.
    pub fn group_sum(&mut self, a: &Var, groups: &[Vec<usize>]) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 || groups.is_empty() {
            return Err(Error::shape("group_sum", format!("{s:?} with {} groups", groups.len())));
        }
        let (n, d) = (s[0], s[1]);
        let mut out = vec![0.0; groups.len() * d];
        for (i, rows) in groups.iter().enumerate() {
            let o = &mut out[i * d..(i + 1) * d];
            for &r in rows {
                if r >= n {
                    return Err(Error::Index {
                        what: "rows",
                        index: r,
                        len: n,
                    });
                }
                for (o, v) in o.iter_mut().zip(a.value.row(r)) {
                    *o += v;
                }
            }
        }
        let op = Op::GroupSum {
            x: a.id,
            groups: groups.to_vec(),
        };
        Ok(self.push(op, Tensor::from_parts(vec![groups.len(), d], out)))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let t = a.value().clone().reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape { x: a.id }, t))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::shape("slice_cols", format!("{s:?}[.., {start}..{end}]")));
        }
        let (n, c) = (s[0], s[1]);
        let w = end - start;
        let x = a.value.data();
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        let op = Op::SliceCols { x: a.id, start };
        Ok(self.push(op, Tensor::from_parts(vec![n, w], data)))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let s = a.shape();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("{s:?} with gamma {:?} beta {:?}", gamma.shape(), beta.shape()),
            ));
        }
        let x = a.value.data();
        let (g, b) = (gamma.value.data(), beta.value.data());
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, inv) = row_stats(xr, eps);
            for j in 0..d {
                or[j] = (xr[j] - mean) * inv * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x: a.id,
            gamma: gamma.id,
            beta: beta.id,
            eps,
        };
        Ok(self.push(op, Tensor::from_parts(s.to_vec(), out)))
    }

    /// Sliding-window concatenation of rows: row `i` of the output is
    /// `[x_{i-pf}; …; x_{i-pf+window-1}]`, with zero rows outside `x`.
    /// Output length is `len + pad_front + pad_back - window + 1`.
    pub fn unfold(&mut self, a: &Var, window: usize, pad_front: usize, pad_back: usize) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 || window == 0 {
            return Err(Error::shape("unfold", format!("{s:?} window {window}")));
        }
        let (n, c) = (s[0], s[1]);
        let padded = n + pad_front + pad_back;
        if padded < window {
            return Err(Error::Config(format!(
                "sequence length {padded} (with padding) is shorter than window {window}"
            )));
        }
        let out_len = padded - window + 1;
        let x = a.value.data();
        let mut data = vec![0.0; out_len * window * c];
        for i in 0..out_len {
            for w in 0..window {
                let src = i + w;
                if src < pad_front || src - pad_front >= n {
                    continue;
                }
                let r = src - pad_front;
                let dst = (i * window + w) * c;
                data[dst..dst + c].copy_from_slice(&x[r * c..(r + 1) * c]);
            }
        }
        let op = Op::Unfold {
            x: a.id,
            window,
            pad_front,
        };
        Ok(self.push(op, Tensor::from_parts(vec![out_len, window * c], data)))
    }

    /// Element `index` of the flattened tensor, as a scalar.
    pub fn pick(&mut self, a: &Var, index: usize) -> Result<Var> {
        let n = a.value.numel();
        if index >= n {
            return Err(Error::Index {
                what: "pick",
                index,
                len: n,
            });
        }
        let v = a.value.data()[index];
        Ok(self.push(Op::Pick { x: a.id, index }, Tensor::scalar(v)))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    fn value_of(&self, id: usize) -> Result<&Tensor> {
        self.nodes[id]
            .value
            .as_deref()
            .ok_or(Error::NotRetained {
                node: id,
                op: self.nodes[id].op.name(),
            })
    }

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    ///
    /// Fails without touching any gradient slot if the path from the loss
    /// to a leaf crosses a discarded activation.
    pub fn backward(&mut self, loss: &Var) -> Result<()> {
        if loss.value.numel() != 1 {
            return Err(Error::NotScalar(loss.shape().to_vec()));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::filled(loss.shape(), 1.0));
        let mut leaf_grads = Vec::new();

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((id, g));
                continue;
            }
            self.value_of(id)?;
            for i in node.op.inputs() {
                self.value_of(i)?;
            }
            for (input, gi) in self.op_backward(id, &g)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        for (id, g) in leaf_grads {
            match &mut self.nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn op_backward(&self, id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[id];
        let val = |i: usize| self.value_of(i);
        let y = val(id)?;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a)?, val(*b)?);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let ga = matmul_nt(g.data(), bv.data(), m, n, k);
                let gb = matmul_tn(av.data(), g.data(), m, k, n);
                vec![
                    (*a, Tensor::from_parts(vec![m, k], ga)),
                    (*b, Tensor::from_parts(vec![k, n], gb)),
                ]
            }
            Op::Transpose(a) => vec![(*a, g.transpose2())],
            Op::Add(a, b) => {
                let bshape = val(*b)?.shape().to_vec();
                let m: usize = bshape.iter().product();
                let mut gb = vec![0.0; m];
                for (i, &v) in g.data().iter().enumerate() {
                    gb[i % m] += v;
                }
                vec![(*a, g.clone()), (*b, Tensor::from_parts(bshape, gb))]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a)?, val(*b)?);
                vec![
                    (*a, g.zip(bv, |gi, bi| gi * bi)),
                    (*b, g.zip(av, |gi, ai| gi * ai)),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::Relu(a) => {
                let x = val(*a)?;
                vec![(*a, g.zip(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }))]
            }
            Op::Sigmoid(a) => vec![(*a, g.zip(y, |gi, yi| gi * yi * (1.0 - yi)))],
            Op::LogSigmoid(a) => {
                let x = val(*a)?;
                vec![(*a, g.zip(x, |gi, xi| gi * sigmoid(-xi)))]
            }
            Op::Log(a) => {
                let x = val(*a)?;
                vec![(*a, g.zip(x, |gi, xi| gi / xi))]
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| gd[idx(i)] * yd[idx(i)]).sum();
                        for i in 0..len {
                            gx[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), gx))]
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let gsum: f64 = (0..len).map(|i| gd[idx(i)]).sum();
                        for i in 0..len {
                            gx[idx(i)] = gd[idx(i)] - yd[idx(i)].exp() * gsum;
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), gx))]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &inp in inputs {
                    let s = val(inp)?.shape().to_vec();
                    let len = s[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    offset += len;
                    res.push((inp, Tensor::from_parts(s, part)));
                }
                res
            }
            Op::Sum(a) => {
                let s = val(*a)?.shape().to_vec();
                vec![(*a, Tensor::filled(&s, g.item()))]
            }
            Op::SumAxis { x, axis } => {
                let s = val(*x)?.shape().to_vec();
                let (outer, len, inner) = axis_split(&s, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            gx[(o * len + i) * inner + j] = g.data()[o * inner + j];
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(s, gx))]
            }
            Op::MaxAxis { x, axis, argmax } => {
                let s = val(*x)?.shape().to_vec();
                let (outer, len, inner) = axis_split(&s, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        let slot = o * inner + j;
                        gx[(o * len + argmax[slot]) * inner + j] += g.data()[slot];
                    }
                }
                vec![(*x, Tensor::from_parts(s, gx))]
            }
            Op::Dropout { x, p, key } => {
                let keep_scale = 1.0 / (1.0 - p);
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if rng::uniform(*key, i as u64) < *p { 0.0 } else { v * keep_scale })
                    .collect();
                vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
            }
            Op::Embedding { table, ids } => {
                let s = val(*table)?.shape().to_vec();
                let d = s[1];
                let mut gt = vec![0.0; s[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g.data()[r * d + j];
                    }
                }
                vec![(*table, Tensor::from_parts(s, gt))]
            }
            Op::SumRows { x, rows } => {
                let s = val(*x)?.shape().to_vec();
                let d = s[1];
                let mut gx = vec![0.0; s[0] * d];
                for &r in rows {
                    for j in 0..d {
                        gx[r * d + j] += g.data()[j];
                    }
                }
                vec![(*x, Tensor::from_parts(s, gx))]
            }
            Op::Reshape { x } => {
                let shape = self.nodes[*x].shape.clone();
                vec![(*x, Tensor::from_parts(shape, g.data().to_vec()))]
            }
            Op::GroupSum { x, groups } => {
                let s = val(*x)?.shape().to_vec();
                let d = s[1];
                let mut gx = vec![0.0; s[0] * d];
                for (i, rows) in groups.iter().enumerate() {
                    for &r in rows {
                        for j in 0..d {
                            gx[r * d + j] += g.data()[i * d + j];
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(s, gx))]
            }
            Op::SliceCols { x, start } => {
                let s = val(*x)?.shape().to_vec();
                let (n, c) = (s[0], s[1]);
                let w = g.cols();
                let mut gx = vec![0.0; n * c];
                for i in 0..n {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![(*x, Tensor::from_parts(s, gx))]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = val(*x)?;
                let gam = val(*gamma)?.data();
                let d = gam.len();
                let mut gx = vec![0.0; xv.numel()];
                let mut ggam = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut gxhat = vec![0.0; d];
                for ((xr, gr), gxr) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let (mean, inv) = row_stats(xr, *eps);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * inv;
                        ggam[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                        gxhat[j] = gr[j] * gam[j];
                    }
                    let m1 = gxhat.iter().sum::<f64>() / d as f64;
                    let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gxr[j] = inv * (gxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![
                    (*x, Tensor::from_parts(xv.shape().to_vec(), gx)),
                    (*gamma, Tensor::from_parts(vec![d], ggam)),
                    (*beta, Tensor::from_parts(vec![d], gbeta)),
                ]
            }
            Op::Unfold { x, window, pad_front } => {
                let s = val(*x)?.shape().to_vec();
                let (n, c) = (s[0], s[1]);
                let out_len = y.rows();
                let mut gx = vec![0.0; n * c];
                for i in 0..out_len {
                    for w in 0..*window {
                        let src = i + w;
                        if src < *pad_front || src - pad_front >= n {
                            continue;
                        }
                        let r = src - pad_front;
                        let off = (i * window + w) * c;
                        for j in 0..c {
                            gx[r * c + j] += g.data()[off + j];
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(s, gx))]
            }
            Op::Pick { x, index } => {
                let s = val(*x)?.shape().to_vec();
                let mut gx = Tensor::zeros(&s);
                gx.data_mut()[*index] = g.item();
                vec![(*x, gx)]
            }
        };
        Ok(out)
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: &Var) -> Option<&Tensor> {
        self.nodes[v.id].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Gradients of every parameter leaf that received one.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::new();
        for n in &self.nodes {
            if let (Some(pid), Some(g)) = (n.param, &n.grad) {
                out.insert(pid, g.clone());
            }
        }
        out
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn softmax_axis(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| xd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|i| (xd[idx(i)] - max).exp()).sum();
            for i in 0..len {
                out[idx(i)] = if log {
                    xd[idx(i)] - max - z.ln()
                } else {
                    (xd[idx(i)] - max).exp() / z
                };
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

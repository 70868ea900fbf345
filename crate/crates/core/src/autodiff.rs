//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive operation in execution order. Node ids
//! are assigned monotonically, so the tape is already in topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! All arithmetic is `f64`. Only shapes that the model code needs are
//! supported: most operations act on rank-2 tensors, and there is no implicit
//! broadcasting apart from [`Graph::add_row`], which adds a bias row to every
//! row of a matrix.

use std::collections::HashMap;

use thiserror::Error;

use crate::params::{ParamId, ParamStore};

/// Probability floor applied before taking logarithms in [`Graph::cross_entropy`].
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: range {start}..{end} out of bounds for extent {extent}")]
    OutOfRange {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call reset() first")]
    BackwardAlreadyRun,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map(|r| r.len()).unwrap_or(0);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        if rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(TensorError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    Sum(NodeId),
    Transpose(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    RepeatRows(NodeId),
    Gather(NodeId, Vec<usize>),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Transpose(..) => "transpose",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::Gather(..) => "gather",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::CrossEntropy(a, _)
            | Op::Sum(a)
            | Op::Transpose(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::MeanRows(a)
            | Op::RepeatRows(a)
            | Op::Gather(a, _) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Summary of one recorded node, for inspecting the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: NodeId,
    pub kind: &'static str,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf that was bound on the graph, in
    /// binding order. Parameters whose leaf did not require grad are skipped.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(move |(pid, nid)| self.get(*nid).map(|g| (*pid, g)))
    }

    pub fn param(&self, pid: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == pid)
            .and_then(|(_, nid)| self.get(*nid))
    }
}

/// A single-threaded computation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, NodeId>,
    bound_order: Vec<(ParamId, NodeId)>,
    backward_done: bool,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRecord {
                id: NodeId(i),
                kind: n.op.kind(),
                inputs: n.op.inputs(),
                shape: n.value.shape.clone(),
            })
            .collect()
    }

    /// Allows another backward sweep over the same record.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Repeated binds of the same
    /// parameter return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> NodeId {
        if let Some(&nid) = self.bound.get(&pid) {
            return nid;
        }
        let p = store.get(pid);
        let nid = self.leaf(p.value.clone(), p.trainable);
        self.bound.insert(pid, nid);
        self.bound_order.push((pid, nid));
        nid
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor { shape: vec![m, n], data: out }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let shape = va.shape.clone();
        Ok(self.push(Op::Add(a, b), Tensor { shape, data }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let shape = va.shape.clone();
        Ok(self.push(Op::Mul(a, b), Tensor { shape, data }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x * factor).collect();
        let shape = va.shape.clone();
        self.push(Op::Scale(a, factor), Tensor { shape, data })
    }

    /// Adds a bias of shape `[n]` (or `[1, n]`) to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2("add_row")?;
        let vb = self.value(bias);
        if vb.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: vec![m, n],
                right: vb.shape.clone(),
            });
        }
        let mut data = self.value(a).data.clone();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(&vb.data) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddRow(a, bias), Tensor { shape: vec![m, n], data }))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = va.shape.clone();
        self.push(Op::Relu(a), Tensor { shape, data })
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.cols();
        let mut data = va.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = va.shape.clone();
        self.push(Op::Softmax(a), Tensor { shape, data })
    }

    /// Mean negative log-likelihood of `targets` under row-stochastic `probs`.
    pub fn cross_entropy(&mut self, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, classes) = self.value(probs).dims2("cross_entropy")?;
        if rows != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![rows, classes],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::TargetOutOfRange {
                index: bad,
                classes,
            });
        }
        let vp = self.value(probs);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -vp.data[i * classes + t].max(LOG_CLAMP).ln())
            .sum();
        let loss = total / rows as f64;
        Ok(self.push(Op::CrossEntropy(probs, targets.to_vec()), Tensor::scalar(loss)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let src = &self.value(a).data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose(a), Tensor { shape: vec![n, m], data }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2("slice_rows")?;
        if start >= end || end > m {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                start,
                end,
                extent: m,
            });
        }
        let data = self.value(a).data[start * n..end * n].to_vec();
        Ok(self.push(
            Op::SliceRows(a, start),
            Tensor {
                shape: vec![end - start, n],
                data,
            },
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                start,
                end,
                extent: n,
            });
        }
        let w = end - start;
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        Ok(self.push(Op::SliceCols(a, start), Tensor { shape: vec![m, w], data }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of zero tensors".into()))?;
        let (m, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_cols")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(first).shape.clone(),
                    right: vec![pm, pn],
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor {
                shape: vec![m, total],
                data,
            },
        ))
    }

    /// Column-wise mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2("mean_rows")?;
        let src = &self.value(a).data;
        let mut data = vec![0.0; n];
        for row in src.chunks(n) {
            for (acc, x) in data.iter_mut().zip(row) {
                *acc += x;
            }
        }
        for x in &mut data {
            *x /= m as f64;
        }
        Ok(self.push(Op::MeanRows(a), Tensor { shape: vec![1, n], data }))
    }

    /// Replicates a single row `count` times: `[1, n] -> [count, n]`.
    pub fn repeat_rows(&mut self, a: NodeId, count: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2("repeat_rows")?;
        if m != 1 || count == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "repeat_rows",
                left: vec![m, n],
                right: vec![count, n],
            });
        }
        let row = self.value(a).data.clone();
        let mut data = Vec::with_capacity(count * n);
        for _ in 0..count {
            data.extend_from_slice(&row);
        }
        Ok(self.push(Op::RepeatRows(a), Tensor { shape: vec![count, n], data }))
    }

    /// Row lookup: `table[ids[i]]` for each i.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, n) = self.value(table).dims2("gather")?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather with no indices".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::OutOfRange {
                op: "gather",
                start: bad,
                end: bad + 1,
                extent: v,
            });
        }
        let src = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Op::Gather(table, ids.to_vec()),
            Tensor {
                shape: vec![ids.len(), n],
                data,
            },
        ))
    }

    /// Row-wise layer normalization with learned gain and bias of width n.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2("layer_norm")?;
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![m, n],
                    right: self.value(p).shape.clone(),
                });
            }
        }
        let src = &self.value(x).data;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                normed[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            Tensor { shape: vec![m, n], data: out },
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.backward_done = true;
        Ok(Gradients {
            grads,
            params: self.bound_order.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape[0], va.shape[1]);
                let n = vb.shape[1];
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &vb.data[p * n..(p + 1) * n];
                            da[i * k + p] = dot(gi, bp);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = va.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let row = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in row.iter_mut().zip(gi) {
                                *d += aip * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = &self.value(*b).data;
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.needs(*b) {
                    let va = &self.value(*a).data;
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * f).collect());
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.needs(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Relu(a) => {
                let va = &self.value(*a).data;
                let d = g
                    .iter()
                    .zip(va)
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value.data;
                let n = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let s = dot(yr, gr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropy(p, targets) => {
                let vp = self.value(*p);
                let c = vp.cols();
                let scale = g[0] / targets.len() as f64;
                let mut d = vec![0.0; vp.numel()];
                for (i, &t) in targets.iter().enumerate() {
                    let prob = vp.data[i * c + t];
                    if prob > LOG_CLAMP {
                        d[i * c + t] = -scale / prob;
                    }
                }
                self.accumulate(grads, *p, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let n = va.cols();
                let mut d = vec![0.0; va.numel()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (m, n) = (va.shape[0], va.shape[1]);
                let w = node.value.shape[1];
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape[0];
                let total = node.value.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                let m = self.value(*a).shape[0];
                let row: Vec<f64> = g.iter().map(|x| x / m as f64).collect();
                let d = row.iter().copied().cycle().take(m * row.len()).collect();
                self.accumulate(grads, *a, d);
            }
            Op::RepeatRows(a) => {
                let n = node.value.shape[1];
                let mut d = vec![0.0; n];
                for row in g.chunks(n) {
                    for (acc, x) in d.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Gather(table, ids) => {
                let vt = self.value(*table);
                let n = vt.cols();
                let mut d = vec![0.0; vt.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for (acc, x) in d[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *acc += x;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let n = node.value.cols();
                let gv = &self.value(*gain).data;
                if self.needs(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(normed.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(gr) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (i, (gr, hr)) in g.chunks(n).zip(normed.chunks(n)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / nf;
                        let mean_dh_h = dot(&dh, hr) / nf;
                        for j in 0..n {
                            dx[i * n + j] = inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let x = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(m(&[&[1.0, 2.0]]));
        let b = g.constant(m(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(m(&[&[1.0, -2.0], &[0.5, 3.0], &[7.0, 1.0]]));
        let zw = g.matmul(z, w).unwrap();
        assert_eq!(g.value(zw), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![0.5]).unwrap(), true);
        let y = g.relu(x);
        let y3 = g.scale(y, 3.0);
        let grads = g.backward(y3).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4], vec![-1.0, -0.1, -3.0, -2.0]).unwrap());
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 2], vec![1000.0, 1000.0]).unwrap());
        let c = g.constant(Tensor::new(vec![1, 2], vec![1f64.ln(), 3f64.ln()]).unwrap());
        let (sa, sb, sc) = (g.softmax(a), g.softmax(b), g.softmax(c));
        assert_eq!(g.value(sa).data(), &[0.5, 0.5]);
        assert_eq!(g.value(sb).data(), &[0.5, 0.5]);
        let vc = g.value(sc).data();
        assert!((vc[0] - 0.25).abs() < 1e-15 && (vc[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_masks_negative_infinity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 3], vec![0.3, f64::NEG_INFINITY, 0.3]).unwrap());
        let s = g.softmax(a);
        assert_eq!(g.value(s).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let onehot = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let l0 = g.cross_entropy(onehot, &[0, 1]).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);

        let uni = g.constant(m(&[&[0.5, 0.5], &[0.5, 0.5]]));
        let l1 = g.cross_entropy(uni, &[0, 1]).unwrap();
        assert!((g.value(l1).item() - 0.693147).abs() < 1e-6);

        let p = g.constant(m(&[&[0.25, 0.75]]));
        let l2 = g.cross_entropy(p, &[1]).unwrap();
        assert!((g.value(l2).item() - 0.287682).abs() < 1e-6);

        let err = g.cross_entropy(p, &[2]).unwrap_err();
        assert_eq!(err, TensorError::TargetOutOfRange { index: 2, classes: 2 });
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let mut g = Graph::new();
        let p = g.constant(m(&[&[1.0, 0.0]]));
        let l = g.cross_entropy(p, &[1]).unwrap();
        assert!((g.value(l).item() - (-LOG_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.1, -2.0, 5.0]).unwrap(), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::BackwardAlreadyRun);
        g.reset();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn records_are_topologically_ordered() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[2, 2], 0.5), true);
        let b = g.constant(Tensor::identity(2));
        let c = g.matmul(a, b).unwrap();
        let d = g.relu(c);
        let _ = g.sum(d);
        for rec in g.records() {
            assert!(rec.inputs.iter().all(|i| *i < rec.id));
        }
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }
}

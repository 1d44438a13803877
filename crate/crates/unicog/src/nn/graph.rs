//! Tape-style computation graph with exact reverse-mode gradients.
//!
//! A [`Graph`] borrows a [`ParamSet`] and records one forward computation;
//! [`Graph::backward`] consumes the graph and accumulates parameter gradients
//! into a [`Grads`] buffer, so batch members can share one accumulator.
//! Node values are plain f64 tensors and every op iterates in a fixed order,
//! which makes forward and backward bitwise deterministic for a given seed.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Named, ordered collection of trainable tensors.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// Gradient accumulator aligned with a [`ParamSet`].
pub struct Grads {
    by_param: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros(params: &ParamSet) -> Self {
        Grads {
            by_param: params
                .iter()
                .map(|(_, e)| vec![0.0; e.tensor.numel()])
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for g in &mut self.by_param {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.by_param[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.by_param[id.0]
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.by_param {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.by_param
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

const MASK_NEG: f64 = -1e30;
const LAYER_NORM_EPS: f64 = 1e-5;

enum Slot {
    Owned(Tensor),
    Param(usize),
}

enum Op {
    Input,
    Param,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    /// y = x W^T (+ b); x: [m, in], w: [out, in], b: [out].
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    /// [m, k] x [k, n] -> [m, n]
    Matmul(NodeId, NodeId),
    /// [m, k] x [n, k]^T -> [m, n]
    MatmulNT(NodeId, NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    ConcatRows(NodeId, NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Gelu(NodeId),
    Relu(NodeId),
    /// Row-wise softmax; node value holds the probabilities.
    Softmax(NodeId),
    /// Adds a large negative constant above the diagonal (keys after queries).
    CausalMask(NodeId),
    /// Row-wise log-softmax; node value holds the log-probabilities.
    LogSoftmax(NodeId),
    /// y_i = -logp[i, targets[i]]
    PickNegLogProb {
        logp: NodeId,
        targets: Vec<u32>,
    },
    MeanRows(NodeId),
    Sum(NodeId),
    SumSquares(NodeId),
    /// Keeps the k largest entries (ties to the lower index), zeroes the rest;
    /// gradients flow only through the kept indices.
    TopK {
        x: NodeId,
        kept: Vec<usize>,
    },
}

struct Node {
    slot: Slot,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    nan_guard: bool,
    label: String,
    nan_failure: Option<String>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            nan_guard: false,
            label: String::new(),
            nan_failure: None,
        }
    }

    /// Enables per-op finiteness checks; used during training to fail fast.
    pub fn with_nan_guard(params: &'p ParamSet) -> Self {
        let mut g = Graph::new(params);
        g.nan_guard = true;
        g
    }

    /// Layer label included in NaN-guard failure messages.
    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    /// First non-finite value seen during forward, if any.
    pub fn check_finite(&self) -> Result<()> {
        match &self.nan_failure {
            Some(msg) => Err(Error::runtime(msg.clone())),
            None => Ok(()),
        }
    }

    pub fn val(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].slot {
            Slot::Owned(t) => t,
            Slot::Param(p) => self.params.get(ParamId(*p)),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, opname: &str) -> NodeId {
        if self.nan_guard && self.nan_failure.is_none() && !value.all_finite() {
            self.nan_failure = Some(format!(
                "NaN detected in {} ({opname})",
                if self.label.is_empty() { "graph" } else { &self.label }
            ));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            slot: Slot::Owned(value),
            op,
        });
        id
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, "input")
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node {
            slot: Slot::Param(id.0),
            op: Op::Param,
        });
        node
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.numel(), tb.numel(), "add: shape mismatch");
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Add(a, b), "add")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.val(x);
        let data: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Scale(x, c), "scale")
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (tx, tw) = (self.val(x), self.val(w));
        let (m, kin) = (tx.rows(), tx.cols());
        let (out, win) = (tw.rows(), tw.cols());
        assert_eq!(kin, win, "linear: input dim mismatch");
        let mut y = vec![0.0; m * out];
        matmul_nt_acc(&mut y, tx.data(), tw.data(), m, kin, out);
        if let Some(bid) = b {
            let tb = self.val(bid);
            assert_eq!(tb.numel(), out, "linear: bias dim mismatch");
            for row in y.chunks_mut(out) {
                for (v, &bv) in row.iter_mut().zip(tb.data()) {
                    *v += bv;
                }
            }
        }
        self.push(Tensor::matrix(m, out, y), Op::Linear { x, w, b }, "linear")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        assert_eq!(k, kb, "matmul: inner dim mismatch");
        let mut y = vec![0.0; m * n];
        matmul_acc(&mut y, ta.data(), tb.data(), m, k, n);
        self.push(Tensor::matrix(m, n, y), Op::Matmul(a, b), "matmul")
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, kb) = (tb.rows(), tb.cols());
        assert_eq!(k, kb, "matmul_nt: inner dim mismatch");
        let mut y = vec![0.0; m * n];
        matmul_nt_acc(&mut y, ta.data(), tb.data(), m, k, n);
        self.push(Tensor::matrix(m, n, y), Op::MatmulNT(a, b), "matmul_nt")
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let t = self.val(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut y = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            let id = id as usize;
            assert!(id < rows, "embedding id {id} out of range {rows}");
            y.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        self.push(
            Tensor::matrix(ids.len(), cols, y),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.cols(), tb.cols(), "concat_rows: col mismatch");
        let cols = ta.cols();
        let rows = ta.rows() + tb.rows();
        let mut y = Vec::with_capacity(rows * cols);
        y.extend_from_slice(ta.data());
        y.extend_from_slice(tb.data());
        self.push(Tensor::matrix(rows, cols, y), Op::ConcatRows(a, b), "concat_rows")
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.val(x);
        let cols = t.cols();
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let y = t.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Tensor::matrix(len, cols, y), Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut y = Vec::with_capacity(rows * len);
        for r in 0..rows {
            y.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
        }
        self.push(Tensor::matrix(rows, len, y), Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.val(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.val(p);
                assert_eq!(t.rows(), rows, "concat_cols: row mismatch");
                let c = t.cols();
                y.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        self.push(
            Tensor::matrix(rows, total, y),
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let t = self.val(x);
        let numel: usize = shape.iter().product();
        assert_eq!(numel, t.numel(), "reshape: numel mismatch");
        let y = Tensor::new(shape.to_vec(), t.data().to_vec());
        self.push(y, Op::Reshape(x), "reshape")
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let (rows, cols) = (tx.rows(), tx.cols());
        assert_eq!(tg.numel(), cols);
        assert_eq!(tb.numel(), cols);
        let mut y = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv;
                y[r * cols + c] = xhat * tg.data()[c] + tb.data()[c];
            }
        }
        self.push(
            Tensor::matrix(rows, cols, y),
            Op::LayerNorm { x, gamma, beta },
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x);
        let data: Vec<f64> = t.data().iter().map(|&v| gelu_fwd(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Gelu(x), "gelu")
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x);
        let data: Vec<f64> = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Relu(x), "relu")
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut y = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                y[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                y[r * cols + c] /= sum;
            }
        }
        self.push(Tensor::matrix(rows, cols, y), Op::Softmax(x), "softmax")
    }

    pub fn causal_mask(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert_eq!(rows, cols, "causal_mask expects a square score matrix");
        let mut y = t.data().to_vec();
        for r in 0..rows {
            for c in (r + 1)..cols {
                y[r * cols + c] += MASK_NEG;
            }
        }
        self.push(Tensor::matrix(rows, cols, y), Op::CausalMask(x), "causal_mask")
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut y = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for c in 0..cols {
                y[r * cols + c] = row[c] - log_sum;
            }
        }
        self.push(Tensor::matrix(rows, cols, y), Op::LogSoftmax(x), "log_softmax")
    }

    pub fn pick_neg_log_prob(&mut self, logp: NodeId, targets: &[u32]) -> NodeId {
        let t = self.val(logp);
        let (rows, cols) = (t.rows(), t.cols());
        assert_eq!(rows, targets.len(), "pick: target count mismatch");
        let mut y = Vec::with_capacity(rows);
        for (r, &tok) in targets.iter().enumerate() {
            assert!((tok as usize) < cols, "pick: target id out of range");
            y.push(-t.data()[r * cols + tok as usize]);
        }
        self.push(
            Tensor::vector(y),
            Op::PickNegLogProb {
                logp,
                targets: targets.to_vec(),
            },
            "pick_neg_log_prob",
        )
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(rows > 0);
        let mut y = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                y[c] += t.data()[r * cols + c];
            }
        }
        y.iter_mut().for_each(|v| *v /= rows as f64);
        self.push(Tensor::matrix(1, cols, y), Op::MeanRows(x), "mean_rows")
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x);
        let s = t.data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x);
        let s = t.data().iter().map(|v| v * v).sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumSquares(x), "sum_squares")
    }

    /// Top-k projection over a vector (or single-row matrix).
    pub fn topk(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let t = self.val(x);
        let d = t.numel();
        assert!(t.rows() == 1, "topk expects a vector or single-row matrix");
        if k == 0 || k > d {
            return Err(Error::config(format!(
                "top-k sparsity k={k} out of range 1..={d}"
            )));
        }
        let kept = topk_indices(t.data(), k);
        let mut y = vec![0.0; d];
        for &i in &kept {
            y[i] = t.data()[i];
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, y), Op::TopK { x, kept }, "topk"))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Reverse-mode sweep from a scalar loss; accumulates parameter gradients
    /// into `grads`. Consumes the graph, so each recorded forward pass can be
    /// differentiated exactly once.
    pub fn backward(self, loss: NodeId, grads: &mut Grads) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::runtime(
                "backward requested for a node that was never computed (no forward pass recorded)",
            ));
        }
        if self.val(loss).numel() != 1 {
            return Err(Error::runtime(format!(
                "backward requires a scalar loss, got {} values",
                self.val(loss).numel()
            )));
        }
        let mut node_grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        node_grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            // Splitting the borrow: the closure only touches indices < i.
            let (earlier, _) = node_grads.split_at_mut(i);
            let mut sink = GradSink {
                nodes: &self.nodes,
                params: self.params,
                node_grads: earlier,
                grads,
            };
            match &self.nodes[i].op {
                Op::Input | Op::Param => {}
                Op::Add(a, b) => {
                    sink.acc(*a, |buf| add_assign(buf, &g));
                    sink.acc(*b, |buf| add_assign(buf, &g));
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    sink.acc(*x, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o += c * gv;
                        }
                    });
                }
                Op::Linear { x, w, b } => {
                    let tx = self.val(*x);
                    let tw = self.val(*w);
                    let (m, kin) = (tx.rows(), tx.cols());
                    let out = tw.rows();
                    sink.acc(*x, |buf| matmul_acc(buf, &g, tw.data(), m, out, kin));
                    sink.acc(*w, |buf| matmul_tn_acc(buf, &g, tx.data(), m, out, kin));
                    if let Some(bid) = b {
                        sink.acc(*bid, |buf| {
                            for row in g.chunks(out) {
                                for (o, &gv) in buf.iter_mut().zip(row) {
                                    *o += gv;
                                }
                            }
                        });
                    }
                }
                Op::Matmul(a, b) => {
                    let ta = self.val(*a);
                    let tb = self.val(*b);
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    sink.acc(*a, |buf| matmul_nt_acc(buf, &g, tb.data(), m, n, k));
                    sink.acc(*b, |buf| matmul_tn_acc(buf, ta.data(), &g, m, k, n));
                }
                Op::MatmulNT(a, b) => {
                    let ta = self.val(*a);
                    let tb = self.val(*b);
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.rows();
                    sink.acc(*a, |buf| matmul_acc(buf, &g, tb.data(), m, n, k));
                    sink.acc(*b, |buf| matmul_tn_acc(buf, &g, ta.data(), m, n, k));
                }
                Op::Embedding { table, ids } => {
                    let cols = self.val(*table).cols();
                    sink.acc(*table, |buf| {
                        for (r, &id) in ids.iter().enumerate() {
                            let dst = &mut buf[id as usize * cols..(id as usize + 1) * cols];
                            for (o, &gv) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::ConcatRows(a, b) => {
                    let na = self.val(*a).numel();
                    sink.acc(*a, |buf| add_assign(buf, &g[..na]));
                    sink.acc(*b, |buf| add_assign(buf, &g[na..]));
                }
                Op::SliceRows { x, start } => {
                    let cols = self.val(*x).cols();
                    let offset = start * cols;
                    sink.acc(*x, |buf| add_assign(&mut buf[offset..offset + g.len()], &g));
                }
                Op::SliceCols { x, start } => {
                    let t = self.val(*x);
                    let (rows, cols) = (t.rows(), t.cols());
                    let len = g.len() / rows;
                    sink.acc(*x, |buf| {
                        for r in 0..rows {
                            let dst = &mut buf[r * cols + start..r * cols + start + len];
                            add_assign(dst, &g[r * len..(r + 1) * len]);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let rows = self.val(parts[0]).rows();
                    let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).cols()).collect();
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (pi, &p) in parts.iter().enumerate() {
                        let w = widths[pi];
                        sink.acc(p, |buf| {
                            for r in 0..rows {
                                let dst = &mut buf[r * w..(r + 1) * w];
                                add_assign(dst, &g[r * total + offset..r * total + offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::Reshape(x) => {
                    sink.acc(*x, |buf| add_assign(buf, &g));
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let tx = self.val(*x);
                    let tg = self.val(*gamma);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    // Recompute row statistics; cheaper than storing them.
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let row = &tx.data()[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = grow[c] * tg.data()[c];
                            dgamma[c] += grow[c] * xhat;
                            dbeta[c] += grow[c];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= cols as f64;
                        mean_dxhat_xhat /= cols as f64;
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = grow[c] * tg.data()[c];
                            dx[r * cols + c] =
                                inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    sink.acc(*x, |buf| add_assign(buf, &dx));
                    sink.acc(*gamma, |buf| add_assign(buf, &dgamma));
                    sink.acc(*beta, |buf| add_assign(buf, &dbeta));
                }
                Op::Gelu(x) => {
                    let tx = self.val(*x);
                    sink.acc(*x, |buf| {
                        for ((o, &xv), &gv) in buf.iter_mut().zip(tx.data()).zip(&g) {
                            *o += gelu_bwd(xv) * gv;
                        }
                    });
                }
                Op::Relu(x) => {
                    let tx = self.val(*x);
                    sink.acc(*x, |buf| {
                        for ((o, &xv), &gv) in buf.iter_mut().zip(tx.data()).zip(&g) {
                            if xv > 0.0 {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Softmax(x) => {
                    let p = self.val(NodeId(i));
                    let (rows, cols) = (p.rows(), p.cols());
                    sink.acc(*x, |buf| {
                        for r in 0..rows {
                            let prow = &p.data()[r * cols..(r + 1) * cols];
                            let grow = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                            for c in 0..cols {
                                buf[r * cols + c] += prow[c] * (grow[c] - dot);
                            }
                        }
                    });
                }
                Op::CausalMask(x) => {
                    // Additive constant mask: identity gradient. Masked keys get
                    // exactly zero probability, so no gradient leaks through.
                    sink.acc(*x, |buf| add_assign(buf, &g));
                }
                Op::LogSoftmax(x) => {
                    let lp = self.val(NodeId(i));
                    let (rows, cols) = (lp.rows(), lp.cols());
                    sink.acc(*x, |buf| {
                        for r in 0..rows {
                            let lrow = &lp.data()[r * cols..(r + 1) * cols];
                            let grow = &g[r * cols..(r + 1) * cols];
                            let gsum: f64 = grow.iter().sum();
                            for c in 0..cols {
                                buf[r * cols + c] += grow[c] - lrow[c].exp() * gsum;
                            }
                        }
                    });
                }
                Op::PickNegLogProb { logp, targets } => {
                    let cols = self.val(*logp).cols();
                    sink.acc(*logp, |buf| {
                        for (r, &tok) in targets.iter().enumerate() {
                            buf[r * cols + tok as usize] -= g[r];
                        }
                    });
                }
                Op::MeanRows(x) => {
                    let t = self.val(*x);
                    let (rows, cols) = (t.rows(), t.cols());
                    let inv = 1.0 / rows as f64;
                    sink.acc(*x, |buf| {
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[r * cols + c] += g[c] * inv;
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let gv = g[0];
                    sink.acc(*x, |buf| buf.iter_mut().for_each(|o| *o += gv));
                }
                Op::SumSquares(x) => {
                    let tx = self.val(*x);
                    let gv = g[0];
                    sink.acc(*x, |buf| {
                        for (o, &xv) in buf.iter_mut().zip(tx.data()) {
                            *o += 2.0 * xv * gv;
                        }
                    });
                }
                Op::TopK { x, kept } => {
                    sink.acc(*x, |buf| {
                        for &idx in kept {
                            buf[idx] += g[idx];
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// Routes a gradient contribution to either an intermediate node buffer or a
/// parameter gradient slot.
struct GradSink<'a, 'p> {
    nodes: &'a [Node],
    params: &'p ParamSet,
    node_grads: &'a mut [Option<Vec<f64>>],
    grads: &'a mut Grads,
}

impl GradSink<'_, '_> {
    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        match &self.nodes[id.0].op {
            Op::Input => {}
            Op::Param => {
                let Slot::Param(pid) = self.nodes[id.0].slot else {
                    unreachable!()
                };
                f(self.grads.get_mut(ParamId(pid)));
            }
            _ => {
                let numel = match &self.nodes[id.0].slot {
                    Slot::Owned(t) => t.numel(),
                    Slot::Param(p) => self.params.get(ParamId(*p)).numel(),
                };
                let buf = self.node_grads[id.0].get_or_insert_with(|| vec![0.0; numel]);
                f(buf);
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o += s;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Indices of the k largest values, ties broken toward the lower index.
/// Returned sorted ascending.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("NaN in topk input")
            .then(a.cmp(&b))
    });
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_params() -> ParamSet {
        ParamSet::new()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let ps = empty_params();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.val(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero_pre_affine() {
        let ps = empty_params();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::matrix(1, 4, vec![3.0; 4]));
        let gamma = g.input(Tensor::vector(vec![1.0; 4]));
        let beta = g.input(Tensor::vector(vec![0.0; 4]));
        let y = g.layer_norm(x, gamma, beta);
        for &v in g.val(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn cross_entropy_of_certain_prediction_is_zero() {
        let ps = empty_params();
        let mut g = Graph::new(&ps);
        // Huge logit margin puts probability 1 on token 0 at f64 precision.
        let x = g.input(Tensor::matrix(1, 3, vec![100.0, -100.0, -100.0]));
        let lp = g.log_softmax(x);
        let nll = g.pick_neg_log_prob(lp, &[0]);
        assert_eq!(g.val(nll).data()[0], 0.0);
    }

    #[test]
    fn log_probs_normalize() {
        let ps = empty_params();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::matrix(3, 7, (0..21).map(|i| (i as f64).sin() * 3.0).collect()));
        let lp = g.log_softmax(x);
        let t = g.val(lp);
        for r in 0..3 {
            let sum: f64 = t.data()[r * 7..(r + 1) * 7].iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn gradient_of_sum_is_one() {
        let mut ps = ParamSet::new();
        let w = ps.register("w", Tensor::vector(vec![1.0, -2.0, 3.0]));
        let mut g = Graph::new(&ps);
        let wn = g.param(w);
        let loss = g.sum(wn);
        let mut grads = Grads::zeros(&ps);
        g.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(w), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn topk_keeps_largest_with_lower_index_ties() {
        let ps = empty_params();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::vector(vec![3.0, 1.0, 4.0, 1.0, 5.0]));
        let y = g.topk(x, 2).unwrap();
        assert_eq!(g.val(y).data(), &[0.0, 0.0, 4.0, 0.0, 5.0]);

        let x2 = g.input(Tensor::vector(vec![2.0, 2.0, 1.0]));
        let y2 = g.topk(x2, 1).unwrap();
        assert_eq!(g.val(y2).data(), &[2.0, 0.0, 0.0]);

        // k = d is the identity.
        let x3 = g.input(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let y3 = g.topk(x3, 3).unwrap();
        assert_eq!(g.val(y3).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn topk_rejects_out_of_range_k() {
        let ps = empty_params();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.topk(x, 0).is_err());
        assert!(g.topk(x, 3).is_err());
    }

    #[test]
    fn topk_is_idempotent_on_nonnegative_input() {
        // Idempotence holds on the op's actual domain: every call site feeds
        // ReLU output. With negative entries a second pass would rank the
        // zeroed slots above kept negatives.
        let mut rng = crate::rng::Rng::new(5);
        for _ in 0..50 {
            let v: Vec<f64> = (0..32).map(|_| rng.normal().max(0.0)).collect();
            let k = 1 + rng.gen_index(32);
            let ps = empty_params();
            let mut g = Graph::new(&ps);
            let x = g.input(Tensor::vector(v));
            let once = g.topk(x, k).unwrap();
            let twice = g.topk(once, k).unwrap();
            assert_eq!(g.val(once).data(), g.val(twice).data());
            let nonzero = g.val(once).data().iter().filter(|v| **v != 0.0).count();
            assert!(nonzero <= k);
        }
    }

    #[test]
    fn topk_routes_gradients_only_through_kept_entries() {
        let mut ps = ParamSet::new();
        let w = ps.register("w", Tensor::vector(vec![3.0, 1.0, 4.0, 1.0, 5.0]));
        let mut g = Graph::new(&ps);
        let wn = g.param(w);
        let y = g.topk(wn, 2).unwrap();
        let loss = g.sum(y);
        let mut grads = Grads::zeros(&ps);
        g.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(w), &[0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut ps = ParamSet::new();
        let w = ps.register("w", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new(&ps);
        let wn = g.param(w);
        let y = g.scale(wn, 2.0);
        let mut grads = Grads::zeros(&ps);
        assert!(g.backward(y, &mut grads).is_err());
    }

    #[test]
    fn backward_without_forward_errors() {
        let ps = empty_params();
        let g = Graph::new(&ps);
        let mut grads = Grads::zeros(&ps);
        assert!(g.backward(NodeId(0), &mut grads).is_err());
    }

    #[test]
    fn nan_guard_reports_label() {
        let ps = empty_params();
        let mut g = Graph::with_nan_guard(&ps);
        g.set_label("layer 3");
        let x = g.input(Tensor::vector(vec![f64::INFINITY]));
        let _ = g.scale(x, 0.0); // inf * 0 = NaN
        let err = g.check_finite().unwrap_err();
        assert!(err.to_string().contains("layer 3"), "{err}");
    }

    #[test]
    fn causal_mask_zeroes_future_probabilities() {
        let ps = empty_params();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::matrix(3, 3, vec![0.3; 9]));
        let m = g.causal_mask(x);
        let p = g.softmax(m);
        let t = g.val(p);
        for r in 0..3 {
            for c in 0..3 {
                let v = t.data()[r * 3 + c];
                if c > r {
                    assert_eq!(v, 0.0);
                } else {
                    assert!((v - 1.0 / (r as f64 + 1.0)).abs() < 1e-12);
                }
            }
        }
    }
}

//! Tape-based reverse-mode differentiation over small dense matrices.
//!
//! The op catalog is fixed: exactly the kernels the task model, the
//! rationale extractor and the training losses need. Every op is recorded on
//! a [`Tape`] in execution order; [`Tape::backward`] walks the tape once in
//! reverse and accumulates gradients into every node that depends on a
//! differentiable leaf.
//!
//! ```
//! use refer_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::column(vec![3.0]));
//! let y = tape.matmul_tn(x, x).unwrap(); // x^T x
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.value(y).values(), &[9.0]);
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

pub mod catalog;
mod gradcheck;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Adam, AdamConfig, AdamState};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Identity of a node within one tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded op, without its operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul,
    Add,
    MulScalar,
    EmbeddingLookup,
    MeanPoolMasked,
    RowSoftmax,
    Sigmoid,
    Relu,
    ConcatRows,
    SelectRows,
    SoftmaxCrossEntropy,
    BinaryCrossEntropyMasked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Transpose {
    None,
    /// `a^T b`
    Left,
    /// `a b^T`
    Right,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul {
        a: NodeId,
        b: NodeId,
        transpose: Transpose,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    MulScalar {
        a: NodeId,
        factor: f64,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    MeanPool {
        x: NodeId,
        mask: NodeId,
    },
    RowSoftmax {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    SelectRows {
        a: NodeId,
        rows: Vec<usize>,
    },
    SoftmaxCe {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        scores: NodeId,
        targets: Vec<f64>,
        mask: Vec<f64>,
        one_sided: bool,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::MulScalar { .. } => OpKind::MulScalar,
            Op::Embedding { .. } => OpKind::EmbeddingLookup,
            Op::MeanPool { .. } => OpKind::MeanPoolMasked,
            Op::RowSoftmax { .. } => OpKind::RowSoftmax,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Relu { .. } => OpKind::Relu,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Bce { .. } => OpKind::BinaryCrossEntropyMasked,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
            Op::MulScalar { a, .. }
            | Op::RowSoftmax { a }
            | Op::Sigmoid { a }
            | Op::Relu { a }
            | Op::SelectRows { a, .. } => vec![*a],
            Op::Embedding { table, .. } => vec![*table],
            Op::MeanPool { x, mask } => vec![*x, *mask],
            Op::ConcatRows { parts } => parts.clone(),
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::Bce { scores, .. } => vec![*scores],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward ops in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a node. `None` only for constants and for intermediate
    /// nodes the backward pass never reached; differentiable leaves always
    /// have an entry (zeros when unreachable).
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds another pass's gradients into this one, node by node.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::contract(format!("{op}: {detail}"))
}

fn check_binary(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::contract(format!("{what} must contain only 0 and 1")))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out);
    out
}

/// Probability clamp used by the binary cross-entropy op.
pub const BCE_EPS: f64 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Lets an evaluation
    /// loop keep parameter leaves while discarding per-example activations.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Input node ids of a recorded op.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, Transpose::None)
    }

    /// `a^T b`.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, Transpose::Left)
    }

    /// `a b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, Transpose::Right)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose: Transpose) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let [ar, ac] = av.shape();
        let [br, bc] = bv.shape();
        let (m, k, k2, n) = match transpose {
            Transpose::None => (ar, ac, br, bc),
            Transpose::Left => (ac, ar, br, bc),
            Transpose::Right => (ar, ac, bc, br),
        };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions differ ({ar}x{ac} vs {br}x{bc}, {transpose:?})"),
            ));
        }
        let mut out = vec![0.0; m * n];
        let (a_data, b_data) = (av.values(), bv.values());
        match transpose {
            Transpose::None => {
                for i in 0..m {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = a_data[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        let brow = &b_data[p * n..(p + 1) * n];
                        for (o, &y) in orow.iter_mut().zip(brow) {
                            *o += x * y;
                        }
                    }
                }
            }
            Transpose::Left => {
                // a is k x m
                for p in 0..k {
                    let brow = &b_data[p * n..(p + 1) * n];
                    for i in 0..m {
                        let x = a_data[p * m + i];
                        if x == 0.0 {
                            continue;
                        }
                        let orow = &mut out[i * n..(i + 1) * n];
                        for (o, &y) in orow.iter_mut().zip(brow) {
                            *o += x * y;
                        }
                    }
                }
            }
            Transpose::Right => {
                // b is n x k
                for i in 0..m {
                    let arow = &a_data[i * k..(i + 1) * k];
                    for j in 0..n {
                        let brow = &b_data[j * k..(j + 1) * k];
                        out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
            }
        }
        let value = Tensor::new(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a, b, transpose }))
    }

    /// Elementwise `a + b`; `b` may also be a `1 x cols` row broadcast over
    /// the rows of `a`, or a `1 x 1` scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let [r, c] = av.shape();
        let out: Vec<f64> = if bv.shape() == [r, c] {
            av.values().iter().zip(bv.values()).map(|(x, y)| x + y).collect()
        } else if bv.shape() == [1, c] {
            av.values()
                .chunks(c)
                .flat_map(|row| row.iter().zip(bv.values()).map(|(x, y)| x + y))
                .collect()
        } else if bv.shape() == [1, 1] {
            let y = bv.values()[0];
            av.values().iter().map(|x| x + y).collect()
        } else {
            return Err(shape_err(
                "add",
                format!("cannot broadcast {:?} onto {:?}", bv.shape(), av.shape()),
            ));
        };
        let value = Tensor::new(r, c, out)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul_scalar(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::contract("mul_scalar: non-finite factor"));
        }
        let av = self.value(a);
        let [r, c] = av.shape();
        let value = Tensor::new(r, c, av.values().iter().map(|x| x * factor).collect())?;
        Ok(self.push(value, Op::MulScalar { a, factor }))
    }

    /// `a - b` for equal shapes or broadcastable `b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.mul_scalar(b, -1.0)?;
        self.add(a, neg)
    }

    /// Gathers rows of `table` (vocab x dim) for each id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let [vocab, dim] = tv.shape();
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(shape_err(
                "embedding",
                format!("id {bad} out of range for vocabulary of {vocab}"),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(tv.row_slice(i));
        }
        let value = Tensor::new(ids.len(), dim, out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean of the rows of `x` (n x d) whose entry in `mask` (n x 1) is 1.
    ///
    /// The mask is binary in every forward use, but the op is defined as the
    /// weighted mean `sum_t m_t x_t / sum_t m_t` for any nonnegative weights,
    /// which is what its gradient with respect to `mask` differentiates.
    pub fn mean_pool_masked(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId> {
        let (xv, mv) = (self.value(x), self.value(mask));
        let [n, d] = xv.shape();
        if mv.shape() != [n, 1] {
            return Err(shape_err(
                "mean_pool_masked",
                format!("mask shape {:?} does not match {n} rows", mv.shape()),
            ));
        }
        if mv.values().iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::contract(
                "mean_pool_masked: mask weights must be finite and nonnegative",
            ));
        }
        let count: f64 = mv.values().iter().sum();
        if count == 0.0 {
            return Err(Error::degenerate("mean_pool_masked: mask selects no rows"));
        }
        let mut out = vec![0.0; d];
        for (t, &m) in mv.values().iter().enumerate() {
            if m != 0.0 {
                for (o, &v) in out.iter_mut().zip(xv.row_slice(t)) {
                    *o += m * v;
                }
            }
        }
        out.iter_mut().for_each(|o| *o /= count);
        let value = Tensor::new(1, d, out)?;
        Ok(self.push(value, Op::MeanPool { x, mask }))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let [r, c] = av.shape();
        let mut out = vec![0.0; r * c];
        for (row, o) in av.values().chunks(c.max(1)).zip(out.chunks_mut(c.max(1))) {
            softmax_into(row, o);
        }
        let value = Tensor::new(r, c, out)?;
        Ok(self.push(value, Op::RowSoftmax { a }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let [r, c] = av.shape();
        let value = Tensor::new(r, c, av.values().iter().map(|&x| sigmoid(x)).collect())?;
        Ok(self.push(value, Op::Sigmoid { a }))
    }

    /// `max(0, x)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let [r, c] = av.shape();
        let value = Tensor::new(r, c, av.values().iter().map(|&x| x.max(0.0)).collect())?;
        Ok(self.push(value, Op::Relu { a }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows: no inputs"));
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("column count {} differs from {cols}", pv.cols()),
                ));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.values());
        }
        let value = Tensor::new(rows, cols, out)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        let [r, c] = av.shape();
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err(
                "select_rows",
                format!("row {bad} out of range for {r} rows"),
            ));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(av.row_slice(i));
        }
        let value = Tensor::new(rows.len(), c, out)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits` (batch x classes) against class
    /// indices. Returns a `1 x 1` node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let [b, m] = lv.shape();
        if targets.len() != b || b == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} targets for {b} rows", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= m) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("target {bad} is not a class index below {m}"),
            ));
        }
        let mut probs = vec![0.0; b * m];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[t];
            softmax_into(row, &mut probs[i * m..(i + 1) * m]);
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(scores)` against `targets` over
    /// positions where `mask` is 1. Probabilities are clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`. With `one_sided` only the positive-class
    /// term `-g ln p` is kept.
    pub fn binary_cross_entropy_masked(
        &mut self,
        scores: NodeId,
        targets: &[f64],
        mask: &[f64],
        one_sided: bool,
    ) -> Result<NodeId> {
        let sv = self.value(scores);
        let n = sv.len();
        if targets.len() != n || mask.len() != n {
            return Err(shape_err(
                "binary_cross_entropy_masked",
                format!(
                    "{n} scores, {} targets, {} mask entries",
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        check_binary(targets, "binary_cross_entropy_masked targets")?;
        check_binary(mask, "binary_cross_entropy_masked mask")?;
        let count: f64 = mask.iter().sum();
        if count == 0.0 {
            return Err(Error::degenerate(
                "binary_cross_entropy_masked: mask selects no positions",
            ));
        }
        let mut loss = 0.0;
        for ((&s, &g), &m) in sv.values().iter().zip(targets).zip(mask) {
            if m == 0.0 {
                continue;
            }
            let p = sigmoid(s).clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= g * p.ln();
            if !one_sided {
                loss -= (1.0 - g) * (1.0 - p).ln();
            }
        }
        let value = Tensor::scalar(loss / count);
        Ok(self.push(
            value,
            Op::Bce {
                scores,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                one_sided,
            },
        ))
    }

    /// Sum of all entries, as a `1 x 1` node (built from matmuls).
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let [r, c] = self.value(a).shape();
        let left = self.constant(Tensor::filled(1, r, 1.0));
        let right = self.constant(Tensor::filled(c, 1, 1.0));
        let rows = self.matmul(left, a)?;
        self.matmul(rows, right)
    }

    /// Mean over the rows of `a`, as a `1 x cols` node.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let r = self.value(a).rows();
        if r == 0 {
            return Err(Error::degenerate("mean_rows: no rows"));
        }
        let w = self.constant(Tensor::filled(1, r, 1.0 / r as f64));
        self.matmul(w, a)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got {:?}",
                lv.shape()
            )));
        }
        self.backward_from(&[(loss, vec![1.0])])
    }

    /// Backpropagates from arbitrary nodes, each seeded with an upstream
    /// gradient of its own shape. Seeds on the same node add up.
    pub fn backward_from(&self, seeds: &[(NodeId, Vec<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| Error::contract("backward: seed node not on this tape"))?;
            if seed.len() != node.value.len() {
                return Err(Error::contract(format!(
                    "backward: seed of length {} for node with {} values",
                    seed.len(),
                    node.value.len()
                )));
            }
            accumulate(&mut grads[id.0], seed.len(), |g| {
                g.iter_mut().zip(seed).for_each(|(a, b)| *a += b)
            });
        }

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.propagate(node, g, lower);
        }

        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && g.is_none() {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, transpose } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let [m, n] = node.value.shape();
                let (ad, bd) = (av.values(), bv.values());
                match transpose {
                    Transpose::None => {
                        let k = av.cols();
                        if self.wants(*a) {
                            // dA = G B^T
                            accumulate(&mut grads[a.0], m * k, |ga| {
                                for i in 0..m {
                                    let grow = &g[i * n..(i + 1) * n];
                                    for p in 0..k {
                                        let brow = &bd[p * n..(p + 1) * n];
                                        ga[i * k + p] +=
                                            grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                    }
                                }
                            });
                        }
                        if self.wants(*b) {
                            // dB = A^T G
                            accumulate(&mut grads[b.0], k * n, |gb| {
                                for i in 0..m {
                                    let grow = &g[i * n..(i + 1) * n];
                                    for p in 0..k {
                                        let x = ad[i * k + p];
                                        if x == 0.0 {
                                            continue;
                                        }
                                        for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                            *o += x * y;
                                        }
                                    }
                                }
                            });
                        }
                    }
                    Transpose::Left => {
                        // out = A^T B, A is k x m
                        let k = av.rows();
                        if self.wants(*a) {
                            // dA = B G^T  (k x m)
                            accumulate(&mut grads[a.0], k * m, |ga| {
                                for p in 0..k {
                                    let brow = &bd[p * n..(p + 1) * n];
                                    for i in 0..m {
                                        let grow = &g[i * n..(i + 1) * n];
                                        ga[p * m + i] +=
                                            brow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                                    }
                                }
                            });
                        }
                        if self.wants(*b) {
                            // dB = A G  (k x n)
                            accumulate(&mut grads[b.0], k * n, |gb| {
                                for p in 0..k {
                                    for i in 0..m {
                                        let x = ad[p * m + i];
                                        if x == 0.0 {
                                            continue;
                                        }
                                        let grow = &g[i * n..(i + 1) * n];
                                        for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                            *o += x * y;
                                        }
                                    }
                                }
                            });
                        }
                    }
                    Transpose::Right => {
                        // out = A B^T, B is n x k
                        let k = av.cols();
                        if self.wants(*a) {
                            // dA = G B  (m x k)
                            accumulate(&mut grads[a.0], m * k, |ga| {
                                for i in 0..m {
                                    for j in 0..n {
                                        let x = g[i * n + j];
                                        if x == 0.0 {
                                            continue;
                                        }
                                        let brow = &bd[j * k..(j + 1) * k];
                                        for (o, &y) in ga[i * k..(i + 1) * k].iter_mut().zip(brow) {
                                            *o += x * y;
                                        }
                                    }
                                }
                            });
                        }
                        if self.wants(*b) {
                            // dB = G^T A  (n x k)
                            accumulate(&mut grads[b.0], n * k, |gb| {
                                for i in 0..m {
                                    let arow = &ad[i * k..(i + 1) * k];
                                    for j in 0..n {
                                        let x = g[i * n + j];
                                        if x == 0.0 {
                                            continue;
                                        }
                                        for (o, &y) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                            *o += x * y;
                                        }
                                    }
                                }
                            });
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(o, x)| *o += x)
                    });
                }
                if self.wants(*b) {
                    let bv = self.value(*b);
                    let blen = bv.len();
                    accumulate(&mut grads[b.0], blen, |gb| {
                        if blen == g.len() {
                            gb.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                        } else {
                            for (j, x) in g.iter().enumerate() {
                                gb[j % blen] += x;
                            }
                        }
                    });
                }
            }
            Op::MulScalar { a, factor } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(o, x)| *o += x * factor)
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let dim = tv.cols();
                    accumulate(&mut grads[table.0], tv.len(), |gt| {
                        for (t, &id) in ids.iter().enumerate() {
                            for (o, x) in gt[id * dim..(id + 1) * dim]
                                .iter_mut()
                                .zip(&g[t * dim..(t + 1) * dim])
                            {
                                *o += x;
                            }
                        }
                    });
                }
            }
            Op::MeanPool { x, mask } => {
                let (xv, mv) = (self.value(*x), self.value(*mask));
                let d = xv.cols();
                let count: f64 = mv.values().iter().sum();
                let pooled = node.value.values();
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], xv.len(), |gx| {
                        for (t, &m) in mv.values().iter().enumerate() {
                            if m == 0.0 {
                                continue;
                            }
                            for (o, &y) in gx[t * d..(t + 1) * d].iter_mut().zip(g) {
                                *o += y * m / count;
                            }
                        }
                    });
                }
                if self.wants(*mask) {
                    accumulate(&mut grads[mask.0], mv.len(), |gm| {
                        for (t, o) in gm.iter_mut().enumerate() {
                            let row = xv.row_slice(t);
                            *o += row
                                .iter()
                                .zip(pooled)
                                .zip(g)
                                .map(|((h, p), y)| y * (h - p))
                                .sum::<f64>()
                                / count;
                        }
                    });
                }
            }
            Op::RowSoftmax { a } => {
                if self.wants(*a) {
                    let c = node.value.cols().max(1);
                    let p = node.value.values();
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for ((prow, grow), orow) in
                            p.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c))
                        {
                            let dot: f64 = prow.iter().zip(grow).map(|(x, y)| x * y).sum();
                            for ((o, &pi), &gi) in orow.iter_mut().zip(prow).zip(grow) {
                                *o += pi * (gi - dot);
                            }
                        }
                    });
                }
            }
            Op::Sigmoid { a } => {
                if self.wants(*a) {
                    let s = node.value.values();
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for ((o, &si), &gi) in ga.iter_mut().zip(s).zip(g) {
                            *o += gi * si * (1.0 - si);
                        }
                    });
                }
            }
            Op::Relu { a } => {
                if self.wants(*a) {
                    let x = self.value(*a).values();
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for ((o, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                            if xi > 0.0 {
                                *o += gi;
                            }
                        }
                    });
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        let slice = &g[offset..offset + len];
                        accumulate(&mut grads[p.0], len, |gp| {
                            gp.iter_mut().zip(slice).for_each(|(o, x)| *o += x)
                        });
                    }
                    offset += len;
                }
            }
            Op::SelectRows { a, rows } => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let c = av.cols();
                    accumulate(&mut grads[a.0], av.len(), |ga| {
                        for (k, &r) in rows.iter().enumerate() {
                            for (o, x) in ga[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g[k * c..(k + 1) * c])
                            {
                                *o += x;
                            }
                        }
                    });
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let m = self.value(*logits).cols();
                    let scale = g[0] / targets.len() as f64;
                    accumulate(&mut grads[logits.0], probs.len(), |gl| {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..m {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                gl[i * m + j] += scale * (probs[i * m + j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::Bce {
                scores,
                targets,
                mask,
                one_sided,
            } => {
                if self.wants(*scores) {
                    let sv = self.value(*scores).values();
                    let count: f64 = mask.iter().sum();
                    let scale = g[0] / count;
                    accumulate(&mut grads[scores.0], sv.len(), |gs| {
                        for (j, o) in gs.iter_mut().enumerate() {
                            if mask[j] == 0.0 {
                                continue;
                            }
                            let p = sigmoid(sv[j]);
                            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                                continue;
                            }
                            let t = targets[j];
                            let d = if *one_sided { -t * (1.0 - p) } else { p - t };
                            *o += scale * d;
                        }
                    });
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

#[cfg(test)]
mod tests;

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use super::AdError;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softsign(Var),
    Dropout(Var, Vec<f64>),
    LogSoftmax(Var),
    Softmax(Var),
    /// Cached per-row inverse standard deviation; the node value is the normalized input.
    LayerNorm(Var, Vec<f64>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    /// Scalar produced outside the graph with a precomputed gradient w.r.t. its input.
    Custom(Var, Tensor),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Tape of operations over 2-D tensors, recorded in construction order.
///
/// Parameters are usually borrowed (`leaf`) so that building a graph per batch
/// does not copy the parameter table.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    mode: Mode,
    seed: u64,
}

impl<'a> Graph<'a> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            seed,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, name: &'static str) -> Result<Var, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_owned(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, AdError> {
        self.push(Cow::Owned(value), op, name)
    }

    pub fn leaf(&mut self, value: &'a Tensor) -> Result<Var, AdError> {
        self.push(Cow::Borrowed(value), Op::Leaf, "leaf")
    }

    pub fn leaf_owned(&mut self, value: Tensor) -> Result<Var, AdError> {
        self.push_owned(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_owned(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(AdError::Dimension {
                op: "matmul_nt",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        matmul_nt_into(ta, tb, &mut out);
        self.push_owned(out, Op::MatMulNT(a, b), "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AdError> {
        let out = self.value(a).transpose();
        self.push_owned(out, Op::Transpose(a), "transpose")
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(ta.rows(), ta.cols(), data)
        } else if tb.shape() == (1, 1) {
            let s = tb.item();
            Ok(ta.map(|x| f(x, s)))
        } else if ta.shape() == (1, 1) {
            let s = ta.item();
            Ok(tb.map(|y| f(s, y)))
        } else {
            Err(AdError::Dimension {
                op: name,
                lhs: ta.shape(),
                rhs: tb.shape(),
            })
        }
    }

    /// Elementwise sum; shapes equal or one operand 1x1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.push_owned(out, Op::Add(a, b), "add")
    }

    /// Elementwise product; shapes equal or one operand 1x1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        self.push_owned(out, Op::Mul(a, b), "mul")
    }

    fn row_binary(&mut self, x: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AdError> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(AdError::Dimension {
                op: name,
                lhs: tx.shape(),
                rhs: tr.shape(),
            });
        }
        let mut out = tx.clone();
        let r = tr.data();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o = f(*o, b);
            }
        }
        Ok(out)
    }

    /// Adds a 1xC row to every row of `x` (bias).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, AdError> {
        let out = self.row_binary(x, row, "add_row", |a, b| a + b)?;
        self.push_owned(out, Op::AddRow(x, row), "add_row")
    }

    /// Multiplies every row of `x` by a 1xC row (gain).
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, AdError> {
        let out = self.row_binary(x, row, "mul_row", |a, b| a * b)?;
        self.push_owned(out, Op::MulRow(x, row), "mul_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let out = self.value(a).map(|x| x * c);
        self.push_owned(out, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AdError> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_owned(out, Op::Relu(a), "relu")
    }

    /// `x / (1 + |x|)`.
    pub fn softsign(&mut self, a: Var) -> Result<Var, AdError> {
        let out = self.value(a).map(|x| x / (1.0 + x.abs()));
        self.push_owned(out, Op::Softsign(a), "softsign")
    }

    /// Inverted dropout. The mask is keyed by the graph seed and the id of the
    /// node being created, so rebuilding the same graph reproduces it exactly.
    /// Identity in [`Mode::Eval`] or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var, AdError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AdError::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.nodes.len() as u64);
        let keep = 1.0 / (1.0 - p);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data)?;
        self.push_owned(out, Op::Dropout(a, mask), "dropout")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, AdError> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(AdError::Contract("log_softmax_rows of an empty tensor".into()));
        }
        if !x.is_finite() {
            return Err(AdError::NonFinite { op: "log_softmax_rows" });
        }
        let out = log_softmax_rows(x);
        self.push_owned(out, Op::LogSoftmax(a), "log_softmax_rows")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AdError> {
        let mut out = log_softmax_rows(self.value(a));
        out.data_mut().iter_mut().for_each(|v| *v = v.exp());
        self.push_owned(out, Op::Softmax(a), "softmax_rows")
    }

    /// Per-row standardization (mean 0, variance 1); no affine part.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var, AdError> {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push_owned(out, Op::LayerNorm(a, inv_std), "layer_norm_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(AdError::Range(format!(
                "rows {start}..{} of a {}x{} tensor",
                start + len,
                x.rows(),
                x.cols()
            )));
        }
        let data = x.data()[start * x.cols()..(start + len) * x.cols()].to_vec();
        let out = Tensor::from_vec(len, x.cols(), data)?;
        self.push_owned(out, Op::SliceRows(a, start), "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(AdError::Range(format!(
                "cols {start}..{} of a {}x{} tensor",
                start + len,
                x.rows(),
                x.cols()
            )));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(x.rows(), len, data)?;
        self.push_owned(out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        let first = parts.first().ok_or_else(|| AdError::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(AdError::Dimension {
                    op: "concat_rows",
                    lhs: self.value(*first).shape(),
                    rhs: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push_owned(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        let first = parts.first().ok_or_else(|| AdError::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(AdError::Dimension {
                    op: "concat_cols",
                    lhs: self.value(*first).shape(),
                    rhs: t.shape(),
                });
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                off += t.cols();
            }
        }
        self.push_owned(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Row lookup (embedding table).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, AdError> {
        let t = self.value(table);
        let mut out = Tensor::zeros(idx.len(), t.cols());
        for (i, &k) in idx.iter().enumerate() {
            if k >= t.rows() {
                return Err(AdError::Range(format!("row {k} of a {}-row table", t.rows())));
            }
            out.row_mut(i).copy_from_slice(t.row(k));
        }
        self.push_owned(out, Op::Gather(table, idx.to_vec()), "gather_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        let s = self.value(a).sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Registers a scalar computed outside the graph from `input`, together with
    /// its gradient with respect to `input`.
    pub fn custom_scalar(&mut self, input: Var, value: f64, local_grad: Tensor) -> Result<Var, AdError> {
        if local_grad.shape() != self.shape(input) {
            return Err(AdError::Dimension {
                op: "custom_scalar",
                lhs: self.shape(input),
                rhs: local_grad.shape(),
            });
        }
        if !local_grad.is_finite() {
            return Err(AdError::NonFinite { op: "custom_scalar" });
        }
        self.push_owned(Tensor::scalar(value), Op::Custom(input, local_grad), "custom_scalar")
    }

    /// Reverse pass from a 1x1 `loss`, visiting nodes in exact reverse order of construction.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AdError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AdError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                matmul_nt_into(g, tb, slot(grads, self, *a));
                matmul_tn_into(ta, g, slot(grads, self, *b));
            }
            Op::MatMulNT(a, b) => {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let (ta, tb) = (self.value(*a), self.value(*b));
                matmul_into(g, tb, slot(grads, self, *a));
                matmul_tn_into(g, ta, slot(grads, self, *b));
            }
            Op::Transpose(a) => slot(grads, self, *a).add_assign(&g.transpose()),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let s = slot(grads, self, v);
                    if s.shape() == g.shape() {
                        s.add_assign(g);
                    } else {
                        s.data_mut()[0] += g.sum();
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                for (v, other) in [(*a, tb), (*b, ta)] {
                    let s = slot(grads, self, v);
                    if s.shape() == g.shape() {
                        if other.shape() == g.shape() {
                            for ((sv, gv), ov) in s.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
                                *sv += gv * ov;
                            }
                        } else {
                            let o = other.item();
                            for (sv, gv) in s.data_mut().iter_mut().zip(g.data()) {
                                *sv += gv * o;
                            }
                        }
                    } else {
                        let dot: f64 = g.data().iter().zip(other.data()).map(|(x, y)| x * y).sum();
                        s.data_mut()[0] += dot;
                    }
                }
            }
            Op::AddRow(x, row) => {
                slot(grads, self, *x).add_assign(g);
                let s = slot(grads, self, *row);
                for r in 0..g.rows() {
                    for (sv, gv) in s.data_mut().iter_mut().zip(g.row(r)) {
                        *sv += gv;
                    }
                }
            }
            Op::MulRow(x, row) => {
                let (tx, tr) = (self.value(*x), self.value(*row));
                {
                    let s = slot(grads, self, *x);
                    for r in 0..g.rows() {
                        for ((sv, gv), rv) in s.row_mut(r).iter_mut().zip(g.row(r)).zip(tr.data()) {
                            *sv += gv * rv;
                        }
                    }
                }
                let s = slot(grads, self, *row);
                for r in 0..g.rows() {
                    for ((sv, gv), xv) in s.data_mut().iter_mut().zip(g.row(r)).zip(tx.row(r)) {
                        *sv += gv * xv;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (sv, gv) in slot(grads, self, *a).data_mut().iter_mut().zip(g.data()) {
                    *sv += gv * c;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                for ((sv, gv), xv) in slot(grads, self, *a).data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    if *xv > 0.0 {
                        *sv += gv;
                    }
                }
            }
            Op::Softsign(a) => {
                let x = self.value(*a);
                for ((sv, gv), xv) in slot(grads, self, *a).data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    let d = 1.0 + xv.abs();
                    *sv += gv / (d * d);
                }
            }
            Op::Dropout(a, mask) => {
                for ((sv, gv), m) in slot(grads, self, *a).data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *sv += gv * m;
                }
            }
            Op::LogSoftmax(a) => {
                let s = slot(grads, self, *a);
                for r in 0..g.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((sv, gv), yv) in s.row_mut(r).iter_mut().zip(g.row(r)).zip(out.row(r)) {
                        *sv += gv - yv.exp() * gsum;
                    }
                }
            }
            Op::Softmax(a) => {
                let s = slot(grads, self, *a);
                for r in 0..g.rows() {
                    let dot: f64 = g.row(r).iter().zip(out.row(r)).map(|(x, y)| x * y).sum();
                    for ((sv, gv), yv) in s.row_mut(r).iter_mut().zip(g.row(r)).zip(out.row(r)) {
                        *sv += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm(a, inv_std) => {
                let n = g.cols() as f64;
                let s = slot(grads, self, *a);
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gymean = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / n;
                    for ((sv, gv), yv) in s.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *sv += inv_std[r] * (gv - gmean - yv * gymean);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let s = slot(grads, self, *a);
                let c = s.cols();
                for (sv, gv) in s.data_mut()[start * c..(start + g.rows()) * c].iter_mut().zip(g.data()) {
                    *sv += gv;
                }
            }
            Op::SliceCols(a, start) => {
                let s = slot(grads, self, *a);
                for r in 0..g.rows() {
                    for (sv, gv) in s.row_mut(r)[*start..start + g.cols()].iter_mut().zip(g.row(r)) {
                        *sv += gv;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let s = slot(grads, self, p);
                    let n = s.len();
                    for (sv, gv) in s.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                        *sv += gv;
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let s = slot(grads, self, p);
                    let c = s.cols();
                    for r in 0..g.rows() {
                        for (sv, gv) in s.row_mut(r).iter_mut().zip(&g.row(r)[off..off + c]) {
                            *sv += gv;
                        }
                    }
                    off += c;
                }
            }
            Op::Gather(table, idx) => {
                let s = slot(grads, self, *table);
                for (i, &k) in idx.iter().enumerate() {
                    for (sv, gv) in s.row_mut(k).iter_mut().zip(g.row(i)) {
                        *sv += gv;
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                slot(grads, self, *a).data_mut().iter_mut().for_each(|v| *v += gv);
            }
            Op::Custom(a, local) => {
                let gv = g.item();
                for (sv, lv) in slot(grads, self, *a).data_mut().iter_mut().zip(local.data()) {
                    *sv += gv * lv;
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], graph: &Graph<'_>, v: Var) -> &'g mut Tensor {
    let (r, c) = graph.nodes[v.0].value.shape();
    grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
}

/// Row-wise log-softmax with per-row max subtraction.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Gradient table returned by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

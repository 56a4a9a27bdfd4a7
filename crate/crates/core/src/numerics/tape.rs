//! Reverse-mode differentiation over a linear tape.
//!
//! Values are computed eagerly as ops are recorded. Nodes are appended after
//! their inputs, so the tape order is a topological order and the backward
//! sweep visits each node exactly once, last to first.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;

use super::params::{Grad, ParamGrads, ParamId, ParamStore};
use super::tensor::{dot, matmul_into, matmul_t_into, sigmoid, t_matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    GatherParam { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SliceCols { x: Var, start: usize, end: usize },
    IndexRows { x: Var, rows: Vec<usize> },
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Conv1dTwoRow { x: Var, r: Var, kernel: Var, width: usize },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    BceMean { probs: Var, targets: Vec<f64> },
    EdgeDot { h: Var, src: Vec<usize>, dst: Vec<usize> },
    SegmentSoftmax { logits: Var, dst: Vec<usize> },
    ScatterWeighted { p: Var, w: Var, src: Vec<usize>, dst: Vec<usize> },
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to any node that required a gradient.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.nodes.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

/// Records a computation over parameters from a [`ParamStore`].
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.require_matrix(op)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant leaf borrowing a tensor that outlives the tape.
    pub fn constant_ref(&mut self, value: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a whole parameter tensor.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(self.store.get(id)),
            requires_grad: true,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Embedding lookup straight from a parameter table. The backward pass
    /// produces a row-sparse gradient.
    pub fn gather_param(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let value = self.store.get(id).select_rows(rows)?;
        Ok(self.push(
            value,
            Op::GatherParam {
                param: id,
                rows: rows.to_vec(),
            },
            true,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Elementwise product with a constant mask of the same size.
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(Error::shape("mul_const", x.shape(), &[mask.len()]));
        }
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst(a, mask), rg))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (rows, _) = self.matrix(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks matrices (or vectors viewed as rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (r, c) = if v.shape().len() == 1 { (1, v.len()) } else { (v.rows(), v.cols()) };
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), v.shape()));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", self.shape(a), shape))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(a, "slice_cols")?;
        if start > end || end > cols {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, end]));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&x.row(i)[start..end]);
        }
        let value = Tensor::matrix(rows, end - start, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols { x: a, start, end }, rg))
    }

    /// Row gather from a node (embedding lookup on an intermediate).
    pub fn index_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(rows)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::IndexRows {
                x: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x < 0.0 { 0.0 } else { x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix(a, "softmax_rows")?;
        let x = self.value(a);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            softmax_into(x.row(i), &mut data[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Convolution over two stacked rows `x` and `r` (each `B×d`) with
    /// `C` kernels of odd width `K` stored as a `C×2K` matrix (row-0 taps
    /// then row-1 taps). Zero padding of `K/2` on both sides and stride 1,
    /// so every channel output has length `d`. Result is `B×(C·d)`, channel
    /// major within each row.
    pub fn conv1d_two_row(&mut self, x: Var, r: Var, kernel: Var) -> Result<Var> {
        let (b, d) = self.matrix(x, "conv1d_two_row")?;
        if self.shape(r) != self.shape(x) {
            return Err(Error::shape("conv1d_two_row", self.shape(x), self.shape(r)));
        }
        let (c, two_k) = self.matrix(kernel, "conv1d_two_row")?;
        if two_k % 2 != 0 || (two_k / 2) % 2 == 0 {
            return Err(Error::shape("conv1d_two_row", self.shape(kernel), &[c, two_k]));
        }
        let width = two_k / 2;
        let pad = width / 2;
        let (xv, rv, kv) = (self.value(x).data(), self.value(r).data(), self.value(kernel).data());
        let mut out = vec![0.0; b * c * d];
        for bi in 0..b {
            let xrow = &xv[bi * d..(bi + 1) * d];
            let rrow = &rv[bi * d..(bi + 1) * d];
            for ch in 0..c {
                let taps = &kv[ch * two_k..(ch + 1) * two_k];
                let o = &mut out[(bi * c + ch) * d..(bi * c + ch + 1) * d];
                for t in 0..width {
                    let (w0, w1) = (taps[t], taps[width + t]);
                    // output position eta reads input eta + t - pad
                    let lo = pad.saturating_sub(t);
                    let hi = (d + pad).saturating_sub(t).min(d);
                    for eta in lo..hi {
                        let j = eta + t - pad;
                        o[eta] += w0 * xrow[j] + w1 * rrow[j];
                    }
                }
            }
        }
        let value = Tensor::matrix(b, c * d, out)?;
        let rg = self.rg(x) || self.rg(r) || self.rg(kernel);
        Ok(self.push(value, Op::Conv1dTwoRow { x, r, kernel, width }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// Mean binary cross-entropy between probabilities and (soft) targets.
    pub fn bce_mean(&mut self, probs: Var, targets: Vec<f64>) -> Result<Var> {
        let p = self.value(probs);
        if targets.len() != p.len() {
            return Err(Error::shape("bce_mean", p.shape(), &[targets.len()]));
        }
        let n = p.len().max(1) as f64;
        let loss = p
            .data()
            .iter()
            .zip(&targets)
            .map(|(&q, &y)| {
                let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(loss), Op::BceMean { probs, targets }, rg))
    }

    /// `out[e] = h[dst[e]] · h[src[e]]`, an `E×1` column.
    pub fn edge_dot(&mut self, h: Var, src: &[usize], dst: &[usize]) -> Result<Var> {
        let (n, _) = self.matrix(h, "edge_dot")?;
        check_edges("edge_dot", src, dst, n, n)?;
        let hv = self.value(h);
        let data: Vec<f64> = src.iter().zip(dst).map(|(&s, &t)| dot(hv.row(t), hv.row(s))).collect();
        let value = Tensor::matrix(src.len(), 1, data)?;
        let rg = self.rg(h);
        Ok(self.push(
            value,
            Op::EdgeDot {
                h,
                src: src.to_vec(),
                dst: dst.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax of an `E×1` column within groups sharing the same `dst`.
    pub fn segment_softmax(&mut self, logits: Var, dst: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != dst.len() {
            return Err(Error::shape("segment_softmax", x.shape(), &[dst.len()]));
        }
        let groups = group_by_dst(dst);
        let mut out = vec![0.0; dst.len()];
        let mut buf_in = Vec::new();
        let mut buf_out = Vec::new();
        for members in groups.values() {
            buf_in.clear();
            buf_in.extend(members.iter().map(|&e| x.data()[e]));
            buf_out.resize(members.len(), 0.0);
            softmax_into(&buf_in, &mut buf_out);
            for (k, &e) in members.iter().enumerate() {
                out[e] = buf_out[k];
            }
        }
        let value = Tensor::matrix(dst.len(), 1, out)?;
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::SegmentSoftmax {
                logits,
                dst: dst.to_vec(),
            },
            rg,
        ))
    }

    /// `out[dst[e]] += w[e] · p[src[e]]` into an `n_out×D` matrix.
    pub fn scatter_weighted(&mut self, p: Var, w: Var, src: &[usize], dst: &[usize], n_out: usize) -> Result<Var> {
        let (n_in, d) = self.matrix(p, "scatter_weighted")?;
        check_edges("scatter_weighted", src, dst, n_in, n_out)?;
        if self.value(w).len() != src.len() {
            return Err(Error::shape("scatter_weighted", self.shape(w), &[src.len()]));
        }
        let (pv, wv) = (self.value(p), self.value(w).data());
        let mut out = vec![0.0; n_out * d];
        for (e, (&s, &t)) in src.iter().zip(dst).enumerate() {
            let row = pv.row(s);
            let o = &mut out[t * d..(t + 1) * d];
            for (ov, v) in o.iter_mut().zip(row) {
                *ov += wv[e] * v;
            }
        }
        let value = Tensor::matrix(n_out, d, out)?;
        let rg = self.rg(p) || self.rg(w);
        Ok(self.push(
            value,
            Op::ScatterWeighted {
                p,
                w,
                src: src.to_vec(),
                dst: dst.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut params = ParamGrads::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>], params: &mut ParamGrads) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.insert(*id, Grad::Dense(g.to_vec())),
            Op::GatherParam { param, rows } => {
                let cols = node.value.cols();
                let mut sparse: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for (k, &r) in rows.iter().enumerate() {
                    let slot = sparse.entry(r).or_insert_with(|| vec![0.0; cols]);
                    for (s, gv) in slot.iter_mut().zip(&g[k * cols..(k + 1) * cols]) {
                        *s += gv;
                    }
                }
                params.insert(*param, Grad::Sparse { cols, rows: sparse });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_t_into(g, val(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    t_matmul_into(val(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_into(g, val(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    t_matmul_into(g, val(*a).data(), gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), bv) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                        *x += y * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, y), av) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                        *x += y * av;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::MulConst(a, mask) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += y * m;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..rows {
                            let src = &g[i * total + offset..i * total + offset + c];
                            gp[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::SliceCols { x, start, end } => {
                let (rows, cols) = (val(*x).rows(), val(*x).cols());
                let w = end - start;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..rows {
                        gx[i * cols + start..i * cols + end]
                            .iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::IndexRows { x, rows } => {
                let c = val(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        gx[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), t) in ga.iter_mut().zip(g).zip(node.value.data()) {
                        *x += y * (1.0 - t * t);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(node.value.data()) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(node.value.data()) {
                        *x += y * s * (1.0 - s);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..rows {
                        let s = node.value.row(i);
                        let gi = &g[i * cols..(i + 1) * cols];
                        let inner = dot(s, gi);
                        for j in 0..cols {
                            ga[i * cols + j] += s[j] * (gi[j] - inner);
                        }
                    }
                }
            }
            Op::Conv1dTwoRow { x, r, kernel, width } => {
                let (b, d) = (val(*x).rows(), val(*x).cols());
                let c = val(*kernel).rows();
                let two_k = 2 * width;
                let pad = width / 2;
                let (xv, rv, kv) = (val(*x).data(), val(*r).data(), val(*kernel).data());
                let mut gx = self.nodes[x.0].requires_grad.then(|| vec![0.0; b * d]);
                let mut gr = self.nodes[r.0].requires_grad.then(|| vec![0.0; b * d]);
                let mut gk = self.nodes[kernel.0].requires_grad.then(|| vec![0.0; c * two_k]);
                for bi in 0..b {
                    let xrow = &xv[bi * d..(bi + 1) * d];
                    let rrow = &rv[bi * d..(bi + 1) * d];
                    for ch in 0..c {
                        let go = &g[(bi * c + ch) * d..(bi * c + ch + 1) * d];
                        let taps = &kv[ch * two_k..(ch + 1) * two_k];
                        for t in 0..*width {
                            let lo = pad.saturating_sub(t);
                            let hi = (d + pad).saturating_sub(t).min(d);
                            let (mut s0, mut s1) = (0.0, 0.0);
                            for eta in lo..hi {
                                let j = eta + t - pad;
                                let gv = go[eta];
                                s0 += gv * xrow[j];
                                s1 += gv * rrow[j];
                                if let Some(gx) = gx.as_mut() {
                                    gx[bi * d + j] += gv * taps[t];
                                }
                                if let Some(gr) = gr.as_mut() {
                                    gr[bi * d + j] += gv * taps[width + t];
                                }
                            }
                            if let Some(gk) = gk.as_mut() {
                                gk[ch * two_k + t] += s0;
                                gk[ch * two_k + width + t] += s1;
                            }
                        }
                    }
                }
                for (v, local) in [(*x, gx), (*r, gr), (*kernel, gk)] {
                    if let (Some(local), Some(dst)) = (local, self.acc(grads, v)) {
                        dst.iter_mut().zip(local).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::SumSquares(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, v) in ga.iter_mut().zip(val(*a).data()) {
                        *x += 2.0 * v * g[0];
                    }
                }
            }
            Op::BceMean { probs, targets } => {
                let n = targets.len().max(1) as f64;
                if let Some(gp) = self.acc(grads, *probs) {
                    for ((x, &q), &y) in gp.iter_mut().zip(val(*probs).data()).zip(targets) {
                        if q <= BCE_EPS || q >= 1.0 - BCE_EPS {
                            continue; // clamped: flat
                        }
                        *x += g[0] * (q - y) / (q * (1.0 - q)) / n;
                    }
                }
            }
            Op::EdgeDot { h, src, dst } => {
                let hv = val(*h);
                let d = hv.cols();
                if let Some(gh) = self.acc(grads, *h) {
                    for (e, (&s, &t)) in src.iter().zip(dst).enumerate() {
                        let ge = g[e];
                        for k in 0..d {
                            gh[t * d + k] += ge * hv.data()[s * d + k];
                            gh[s * d + k] += ge * hv.data()[t * d + k];
                        }
                    }
                }
            }
            Op::SegmentSoftmax { logits, dst } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let s = node.value.data();
                    for members in group_by_dst(dst).values() {
                        let inner: f64 = members.iter().map(|&e| s[e] * g[e]).sum();
                        for &e in members {
                            gl[e] += s[e] * (g[e] - inner);
                        }
                    }
                }
            }
            Op::ScatterWeighted { p, w, src, dst } => {
                let (pv, wv) = (val(*p), val(*w).data());
                let d = pv.cols();
                if let Some(gp) = self.acc(grads, *p) {
                    for (e, (&s, &t)) in src.iter().zip(dst).enumerate() {
                        for k in 0..d {
                            gp[s * d + k] += wv[e] * g[t * d + k];
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for (e, (&s, &t)) in src.iter().zip(dst).enumerate() {
                        gw[e] += dot(&g[t * d..(t + 1) * d], pv.row(s));
                    }
                }
            }
        }
    }
}

fn check_edges(op: &'static str, src: &[usize], dst: &[usize], n_src: usize, n_dst: usize) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::shape(op, &[src.len()], &[dst.len()]));
    }
    if let Some(&bad) = src.iter().find(|&&s| s >= n_src) {
        return Err(Error::invalid(format!("{op}: source node {bad} outside 0..{n_src}")));
    }
    if let Some(&bad) = dst.iter().find(|&&t| t >= n_dst) {
        return Err(Error::invalid(format!("{op}: target node {bad} outside 0..{n_dst}")));
    }
    Ok(())
}

fn group_by_dst(dst: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (e, &t) in dst.iter().enumerate() {
        groups.entry(t).or_default().push(e);
    }
    groups
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

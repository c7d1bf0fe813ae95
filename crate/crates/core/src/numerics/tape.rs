// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over a linear tape.
//!
//! Only the operations the model's training paths need are recorded. A tape
//! exists only while something is being trained; inference never builds one.

use std::borrow::Cow;

use super::ops::{self, LayerNormStats};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    MulScalar(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: LayerNormStats<T>,
    },
    Gelu(Var),
    MaskedSoftmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<Vec<T>>,
    },
    Sum(Var),
    Sigmoid(Var),
    Affine(Var, T),
    ClampStraightThrough(Var),
    Select(Var, usize),
}

struct Node<'w, T: Scalar> {
    value: Cow<'w, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation, replayed backwards by [`Tape::backward`].
pub struct Tape<'w, T: Scalar = f32> {
    nodes: Vec<Node<'w, T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'w, T: Scalar> Default for Tape<'w, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'w, T: Scalar> Tape<'w, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf; borrowed leaves avoid copying frozen weights.
    pub fn leaf(&mut self, value: Cow<'w, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_bt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(row).len() != cols {
            return Err(Error::shape("add_row", "bias length differs from columns"));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, &b) in chunk.iter_mut().zip(&bias) {
                *o = *o + b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", va.shape(), c.shape())));
        }
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    /// Scales every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", "scale must have one element"));
        }
        let k = self.value(s).data()[0];
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, stats) = ops::layernorm(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, stats }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn masked_softmax(&mut self, scores: Var, mask: &Tensor<T>) -> Result<Var> {
        let out = ops::masked_softmax(self.value(scores), mask)?;
        let rg = self.rg(scores);
        Ok(self.push(out, Op::MaskedSoftmax(scores), rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = ops::embedding_lookup(self.value(table), ids)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.dims2();
        if start + len > cols {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {cols}")));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let out = concat_cols(&parts.iter().map(|&p| self.value(p)).collect::<Vec<_>>())?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let out = concat_rows(&parts.iter().map(|&p| self.value(p)).collect::<Vec<_>>())?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = select_rows(self.value(x), rows)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean NLL over `(row, gold)` pairs of a logits matrix.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_over_positions(self.value(logits), targets)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `a * x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Var {
        let out = self.value(x).map(|v| a * v + b);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, a), rg)
    }

    /// Clamp to `[0, 1]` whose adjoint passes gradients through unchanged.
    pub fn clamp01_straight_through(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()).min(T::one()));
        let rg = self.rg(x);
        self.push(out, Op::ClampStraightThrough(x), rg)
    }

    /// Picks one flat element as a `[1]` tensor.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.len() {
            return Err(Error::shape("select", format!("index {index} >= {}", v.len())));
        }
        let out = Tensor::scalar(v.data()[index]);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Select(x, index), rg))
    }

    /// Runs the adjoint sweep from a scalar `loss`.
    ///
    /// Every leaf registered with `requires_grad` gets a gradient, zero if the
    /// loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        target: Var,
        delta: Tensor<T>,
    ) -> Result<()> {
        if !self.rg(target) {
            return Ok(());
        }
        let delta = if delta.shape() == self.value(target).shape() {
            delta
        } else {
            delta.reshape(self.value(target).shape().to_vec())?
        };
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    /// Gradient slot for `target`, zero-filled on first touch so sparse ops
    /// can add into it without building a full-size delta.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], target: Var) -> &'g mut Tensor<T> {
        grads[target.0].get_or_insert_with(|| Tensor::zeros(self.value(target).shape()))
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let da = ops::matmul_bt(g, self.value(*b))?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.rg(*b) {
                    let db = ops::matmul_at(self.value(*a), g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::MatMulBt(a, b) => {
                // out = a bᵀ ; da = g b ; db = gᵀ a
                if self.rg(*a) {
                    let da = ops::matmul(g, self.value(*b))?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.rg(*b) {
                    let db = ops::matmul_at(g, self.value(*a))?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.rg(*row) {
                    let cols = g.cols();
                    let mut db = vec![T::zero(); cols];
                    for chunk in g.data().chunks(cols) {
                        for (d, &x) in db.iter_mut().zip(chunk) {
                            *d = *d + x;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::new(vec![cols], db)?)?;
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = zip_map(g, self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, d)?;
                }
                if self.rg(*b) {
                    let d = zip_map(g, self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, d)?;
                }
            }
            Op::MulConst(a, c) => {
                let d = zip_map(g, c, |x, y| x * y)?;
                self.accumulate(grads, *a, d)?;
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).data()[0];
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.map(|x| x * k))?;
                }
                if self.rg(*s) {
                    let dot: T = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * y)
                        .sum();
                    self.accumulate(grads, *s, Tensor::scalar(dot))?;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (dx, dg, db) = ops::layernorm_backward(stats, self.value(*gain), g);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gain, dg)?;
                self.accumulate(grads, *bias, db)?;
            }
            Op::Gelu(x) => {
                let d = zip_map(g, self.value(*x), |gv, xv| gv * ops::gelu_grad_scalar(xv))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::MaskedSoftmax(scores) => {
                let d = ops::softmax_backward(&node.value, g);
                self.accumulate(grads, *scores, d)?;
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let dim = self.value(*table).cols();
                    let d = self.slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        let src = g.row(r);
                        let dst = &mut d.data_mut()[id * dim..(id + 1) * dim];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let rows = self.value(*x).rows();
                    let len = g.cols();
                    let d = self.slot(grads, *x);
                    for r in 0..rows {
                        let dst = &mut d.row_mut(r)[*start..*start + len];
                        for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, len) = self.value(p).dims2();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(rows * len);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + len]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![rows, len], data)?)?;
                    }
                    offset += len;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let cols = g.cols();
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![rows, cols], data)?)?;
                    }
                    offset += rows;
                }
            }
            Op::SelectRows { x, rows } => {
                if self.rg(*x) {
                    let d = self.slot(grads, *x);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let upstream = g.data()[0];
                let n = T::from_f64(targets.len() as f64);
                let mut d = Tensor::zeros(self.value(*logits).shape());
                for (&(r, gold), p) in targets.iter().zip(probs) {
                    let row = d.row_mut(r);
                    for (o, &pv) in row.iter_mut().zip(p) {
                        *o = *o + upstream * pv / n;
                    }
                    row[gold] = row[gold] - upstream / n;
                }
                self.accumulate(grads, *logits, d)?;
            }
            Op::Sum(x) => {
                let upstream = g.data()[0];
                let d = Tensor::full(self.value(*x).shape(), upstream);
                self.accumulate(grads, *x, d)?;
            }
            Op::Sigmoid(x) => {
                let d = zip_map(g, &node.value, |gv, s| gv * s * (T::one() - s))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Affine(x, a) => {
                let a = *a;
                self.accumulate(grads, *x, g.map(|v| v * a))?;
            }
            Op::ClampStraightThrough(x) => {
                self.accumulate(grads, *x, g.clone())?;
            }
            Op::Select(x, index) => {
                if self.rg(*x) {
                    let d = self.slot(grads, *x);
                    d.data_mut()[*index] = d.data()[*index] + g.data()[0];
                }
            }
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.len() != b.len() {
        return Err(Error::shape("zip_map", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape().to_vec(), data)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let rows = parts.first().map_or(0, |p| p.rows());
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(Error::shape("concat_cols", "row counts differ"));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![rows, total], data)
}

pub(crate) fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let cols = parts.iter().map(|p| p.cols()).find(|&c| c > 0).unwrap_or(0);
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.is_empty() {
            continue;
        }
        if p.cols() != cols {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        data.extend_from_slice(p.data());
        rows += p.rows();
    }
    Tensor::new(vec![rows, cols], data)
}

pub(crate) fn select_rows<T: Scalar>(x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let (n, cols) = x.dims2();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        if r >= n {
            return Err(Error::shape("select_rows", format!("row {r} >= {n}")));
        }
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), cols], data)
}

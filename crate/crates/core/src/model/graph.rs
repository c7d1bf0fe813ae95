// SPDX-License-Identifier: MIT OR Apache-2.0

//! One forward pass, two backends: plain tensors for inference and a tape for
//! training.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use super::ParamId;
use crate::error::Result;
use crate::numerics::{self, ops, Gradients, Scalar, Tape, Tensor, Var};

/// Operations the transformer forward pass is written against.
pub trait Graph<'w, T: Scalar> {
    type V: Clone;

    fn param(&mut self, id: ParamId, value: &'w Tensor<T>) -> Self::V;
    fn constant(&mut self, value: Tensor<T>) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn matmul_bt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: T) -> Self::V;
    fn mul_const(&mut self, a: &Self::V, c: Tensor<T>) -> Result<Self::V>;
    fn mul_scalar(&mut self, a: &Self::V, s: &Self::V) -> Result<Self::V>;
    fn layernorm(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn gelu(&mut self, x: &Self::V) -> Self::V;
    fn masked_softmax(&mut self, scores: &Self::V, mask: &Tensor<T>) -> Result<Self::V>;
    fn embedding(&mut self, table: &Self::V, ids: &[usize]) -> Result<Self::V>;
    fn slice_cols(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn select_rows(&mut self, x: &Self::V, rows: &[usize]) -> Result<Self::V>;
}

/// A value in the eager backend: borrowed weights or a computed tensor.
#[derive(Debug, Clone)]
pub enum EagerValue<'w, T> {
    Borrowed(&'w Tensor<T>),
    Owned(Rc<Tensor<T>>),
}

impl<T> EagerValue<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            EagerValue::Borrowed(t) => t,
            EagerValue::Owned(t) => t,
        }
    }
}

impl<T: Scalar> EagerValue<'_, T> {
    pub fn into_tensor(self) -> Tensor<T> {
        match self {
            EagerValue::Borrowed(t) => t.clone(),
            EagerValue::Owned(t) => Rc::try_unwrap(t).unwrap_or_else(|rc| (*rc).clone()),
        }
    }
}

fn owned<'w, T>(t: Tensor<T>) -> EagerValue<'w, T> {
    EagerValue::Owned(Rc::new(t))
}

/// Inference backend. Records nothing.
#[derive(Debug, Default)]
pub struct Eager;

impl<'w, T: Scalar> Graph<'w, T> for Eager {
    type V = EagerValue<'w, T>;

    fn param(&mut self, _id: ParamId, value: &'w Tensor<T>) -> Self::V {
        EagerValue::Borrowed(value)
    }

    fn constant(&mut self, value: Tensor<T>) -> Self::V {
        owned(value)
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T> {
        v.get()
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::matmul(a.get(), b.get()).map(owned)
    }

    fn matmul_bt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::matmul_bt(a.get(), b.get()).map(owned)
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        let mut out = a.get().clone();
        out.add_assign(b.get())?;
        Ok(owned(out))
    }

    fn scale(&mut self, a: &Self::V, s: T) -> Self::V {
        owned(a.get().map(|x| x * s))
    }

    fn mul_const(&mut self, a: &Self::V, c: Tensor<T>) -> Result<Self::V> {
        let a = a.get();
        if a.shape() != c.shape() {
            return Err(crate::error::Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", a.shape(), c.shape()),
            ));
        }
        let data = a.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        Tensor::new(a.shape().to_vec(), data).map(owned)
    }

    fn mul_scalar(&mut self, a: &Self::V, s: &Self::V) -> Result<Self::V> {
        let s = s.get();
        if s.len() != 1 {
            return Err(crate::error::Error::shape(
                "mul_scalar",
                format!("scale has shape {:?}", s.shape()),
            ));
        }
        let s = s.data()[0];
        Ok(owned(a.get().map(|x| x * s)))
    }

    fn layernorm(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V) -> Result<Self::V> {
        ops::layernorm(x.get(), gain.get(), bias.get()).map(|(y, _)| owned(y))
    }

    fn gelu(&mut self, x: &Self::V) -> Self::V {
        owned(ops::gelu(x.get()))
    }

    fn masked_softmax(&mut self, scores: &Self::V, mask: &Tensor<T>) -> Result<Self::V> {
        ops::masked_softmax(scores.get(), mask).map(owned)
    }

    fn embedding(&mut self, table: &Self::V, ids: &[usize]) -> Result<Self::V> {
        ops::embedding_lookup(table.get(), ids).map(owned)
    }

    fn slice_cols(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V> {
        let x = x.get();
        let (rows, cols) = x.dims2();
        if start + len > cols {
            return Err(crate::error::Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {cols}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        Tensor::new(vec![rows, len], data).map(owned)
    }

    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| p.get()).collect();
        numerics::concat_cols(&refs).map(owned)
    }

    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| p.get()).collect();
        numerics::concat_rows(&refs).map(owned)
    }

    fn select_rows(&mut self, x: &Self::V, rows: &[usize]) -> Result<Self::V> {
        numerics::select_rows(x.get(), rows).map(owned)
    }
}

/// Training backend: a tape plus the mapping from parameters to tape leaves.
///
/// Parameters outside `trainable` are recorded as constants, so no gradient
/// is computed for them.
pub struct Recorder<'w, T: Scalar> {
    pub tape: Tape<'w, T>,
    trainable: BTreeSet<ParamId>,
    vars: BTreeMap<ParamId, Var>,
}

impl<'w, T: Scalar> Recorder<'w, T> {
    pub fn new(trainable: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            tape: Tape::new(),
            trainable: trainable.into_iter().collect(),
            vars: BTreeMap::new(),
        }
    }

    /// Registers an externally owned trainable leaf, such as gate logits.
    pub fn external(&mut self, id: ParamId, value: &'w Tensor<T>) -> Var {
        let v = self.tape.leaf(Cow::Borrowed(value), true);
        self.vars.insert(id, v);
        v
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars.get(&id).copied()
    }

    /// Runs backward from `loss` and returns the gradient of every trainable
    /// parameter that was touched.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<ParamId, Tensor<T>>> {
        let mut grads: Gradients<T> = self.tape.backward(loss)?;
        Ok(self
            .vars
            .iter()
            .filter_map(|(&id, &v)| grads.take(v).map(|g| (id, g)))
            .collect())
    }
}

impl<'w, T: Scalar> Graph<'w, T> for Recorder<'w, T> {
    type V = Var;

    fn param(&mut self, id: ParamId, value: &'w Tensor<T>) -> Var {
        if let Some(&v) = self.vars.get(&id) {
            return v;
        }
        let v = self
            .tape
            .leaf(Cow::Borrowed(value), self.trainable.contains(&id));
        self.vars.insert(id, v);
        v
    }

    fn constant(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.tape.value(*v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.matmul(*a, *b)
    }

    fn matmul_bt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.matmul_bt(*a, *b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn scale(&mut self, a: &Var, s: T) -> Var {
        self.tape.scale(*a, s)
    }

    fn mul_const(&mut self, a: &Var, c: Tensor<T>) -> Result<Var> {
        self.tape.mul_const(*a, c)
    }

    fn mul_scalar(&mut self, a: &Var, s: &Var) -> Result<Var> {
        self.tape.mul_scalar(*a, *s)
    }

    fn layernorm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        self.tape.layernorm(*x, *gain, *bias)
    }

    fn gelu(&mut self, x: &Var) -> Var {
        self.tape.gelu(*x)
    }

    fn masked_softmax(&mut self, scores: &Var, mask: &Tensor<T>) -> Result<Var> {
        self.tape.masked_softmax(*scores, mask)
    }

    fn embedding(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        self.tape.embedding(*table, ids)
    }

    fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        self.tape.slice_cols(*x, start, len)
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.tape.concat_cols(parts)
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.tape.concat_rows(parts)
    }

    fn select_rows(&mut self, x: &Var, rows: &[usize]) -> Result<Var> {
        self.tape.select_rows(*x, rows)
    }
}

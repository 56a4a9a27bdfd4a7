use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is used for; decides whether the L2 penalty applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Lookup tables (node and relation embeddings). Not regularised.
    Embedding,
    /// Projection and kernel weights. Regularised.
    Weight,
    /// Per-relation scalars and other small free parameters. Not regularised.
    Scalar,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("initial value of {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, kind, value });
        Ok(id)
    }

    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        self.add(name, kind, Tensor::glorot(rows, cols, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Replace all values from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::invalid("parameter layouts differ"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::invalid(format!("parameter {} does not match {}", dst.name, src.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Gradient of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum Grad {
    Dense(Vec<f64>),
    /// Row-sparse gradient of an embedding table, keyed by row index.
    Sparse { cols: usize, rows: BTreeMap<usize, Vec<f64>> },
}

impl Grad {
    pub fn sum_squares(&self) -> f64 {
        match self {
            Grad::Dense(g) => g.iter().map(|v| v * v).sum(),
            Grad::Sparse { rows, .. } => rows.values().flatten().map(|v| v * v).sum(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let it: Box<dyn Iterator<Item = &mut f64>> = match self {
            Grad::Dense(g) => Box::new(g.iter_mut()),
            Grad::Sparse { rows, .. } => Box::new(rows.values_mut().flatten()),
        };
        for v in it {
            *v *= factor;
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        match self {
            Grad::Dense(g) => g.clone(),
            Grad::Sparse { cols, rows } => {
                let mut out = vec![0.0; len];
                for (&r, g) in rows {
                    out[r * cols..(r + 1) * cols].copy_from_slice(g);
                }
                out
            }
        }
    }

    pub(crate) fn merge(&mut self, other: Grad) {
        match (self, other) {
            (Grad::Dense(a), Grad::Dense(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (Grad::Sparse { rows: a, .. }, Grad::Sparse { rows: b, .. }) => {
                for (r, g) in b {
                    let slot = a.entry(r).or_insert_with(|| vec![0.0; g.len()]);
                    slot.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            (this, other) => {
                // Mixed use of one table: fall back to dense.
                let len = match &other {
                    Grad::Dense(g) => g.len(),
                    Grad::Sparse { .. } => match this {
                        Grad::Dense(g) => g.len(),
                        Grad::Sparse { .. } => unreachable!(),
                    },
                };
                let mut dense = this.to_dense(len);
                dense.iter_mut().zip(other.to_dense(len)).for_each(|(x, y)| *x += y);
                *this = Grad::Dense(dense);
            }
        }
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub(crate) grads: BTreeMap<ParamId, Grad>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Grad> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Grad)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Grad)> {
        self.grads.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, id: ParamId, grad: Grad) {
        match self.grads.get_mut(&id) {
            Some(existing) => existing.merge(grad),
            None => {
                self.grads.insert(id, grad);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Grad::sum_squares).sum::<f64>().sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

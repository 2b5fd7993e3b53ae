//! Learnable parameters and their gradients.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Row-sparse tables (embeddings) only receive updates on rows that were
    /// looked up in the current batch.
    pub sparse: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, sparse: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, sparse });
        ParamId(self.params.len() - 1)
    }

    /// Normal(0, std) initialized `rows × cols` parameter.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        sparse: bool,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols)
            .map(|_| T::from_f64_lossy(normal.sample(rng)))
            .collect();
        self.add(name, Tensor::from_rows(rows, cols, data), sparse)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.value.data())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    sparse: p.sparse,
                })
                .collect(),
        }
    }
}

/// Gradient of one parameter: dense, or a set of touched rows.
#[derive(Clone, Debug)]
pub enum ParamGrad<T> {
    Dense(Tensor<T>),
    Rows {
        cols: usize,
        rows: BTreeMap<usize, Vec<T>>,
    },
}

impl<T: Scalar> ParamGrad<T> {
    pub fn to_dense(&self, rows: usize, cols: usize) -> Tensor<T> {
        match self {
            ParamGrad::Dense(t) => t.clone(),
            ParamGrad::Rows { rows: map, .. } => {
                let mut t = Tensor::zeros(rows, cols);
                for (&r, g) in map {
                    t.row_mut(r).copy_from_slice(g);
                }
                t
            }
        }
    }

    fn add_dense(&mut self, grad: &Tensor<T>) {
        match self {
            ParamGrad::Dense(t) => t.add_assign(grad),
            ParamGrad::Rows { rows, .. } => {
                let mut dense = grad.clone();
                for (&r, g) in rows.iter() {
                    for (d, &v) in dense.row_mut(r).iter_mut().zip(g) {
                        *d = *d + v;
                    }
                }
                *self = ParamGrad::Dense(dense);
            }
        }
    }

    fn add_row(&mut self, row: usize, grad: &[T]) {
        match self {
            ParamGrad::Dense(t) => {
                for (d, &v) in t.row_mut(row).iter_mut().zip(grad) {
                    *d = *d + v;
                }
            }
            ParamGrad::Rows { rows, .. } => {
                let entry = rows
                    .entry(row)
                    .or_insert_with(|| vec![T::zero(); grad.len()]);
                for (d, &v) in entry.iter_mut().zip(grad) {
                    *d = *d + v;
                }
            }
        }
    }

    fn merge(&mut self, other: ParamGrad<T>) {
        match other {
            ParamGrad::Dense(t) => self.add_dense(&t),
            ParamGrad::Rows { rows, .. } => {
                for (r, g) in rows {
                    self.add_row(r, &g);
                }
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        let it: Box<dyn Iterator<Item = &T>> = match self {
            ParamGrad::Dense(t) => Box::new(t.data().iter()),
            ParamGrad::Rows { rows, .. } => Box::new(rows.values().flatten()),
        };
        it.map(|v| v.to_f64_lossy().powi(2)).sum()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, ParamGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGrad<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn accumulate_dense(&mut self, id: ParamId, grad: &Tensor<T>) {
        match self.grads.get_mut(&id) {
            Some(g) => g.add_dense(grad),
            None => {
                self.grads.insert(id, ParamGrad::Dense(grad.clone()));
            }
        }
    }

    pub(crate) fn accumulate_row(&mut self, id: ParamId, row: usize, grad: &[T]) {
        self.grads
            .entry(id)
            .or_insert_with(|| ParamGrad::Rows {
                cols: grad.len(),
                rows: BTreeMap::new(),
            })
            .add_row(row, grad);
    }

    /// Sums `other` into `self`. Summation order is the caller's order, so
    /// merging per-example gradients in a fixed order is deterministic.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(mine) => mine.merge(g),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    /// Dense gradient for `id`, zeros when the parameter was not reached.
    pub fn dense(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        let v = store.value(id);
        match self.grads.get(&id) {
            Some(g) => g.to_dense(v.rows(), v.cols()),
            None => Tensor::zeros(v.rows(), v.cols()),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(ParamGrad::sq_norm).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_then_dense_merge() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("t", Tensor::zeros(3, 2), true);
        let mut g = Gradients::new();
        g.accumulate_row(id, 1, &[1.0, 2.0]);
        g.accumulate_row(id, 1, &[1.0, 1.0]);
        let mut other = Gradients::new();
        other.accumulate_dense(id, &Tensor::full(3, 2, 0.5));
        g.merge(other);
        assert_eq!(g.dense(&store, id).data(), &[0.5, 0.5, 2.5, 3.5, 0.5, 0.5]);
    }
}

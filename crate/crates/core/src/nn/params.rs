//! Named parameter tensors and their gradients.

use std::collections::HashMap;

use ndarray::{Array2, Ix2};
use rand::Rng;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    /// Registers a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: &str, value: Array2<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Uniform in `+-1/sqrt(fan_in)`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        (rows, cols): (usize, usize),
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let v = Array2::from_shape_fn((rows, cols), |_| T::of(rng.gen_range(-bound..bound)));
        self.insert(name, v)
    }

    pub fn insert_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.insert(name, Array2::from_elem((rows, cols), T::of(value)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Element-type conversion, e.g. to run gradient checks in `f64`.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::of(x.to_f64_lossy())))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; untouched parameters
/// stay unallocated.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(len: usize) -> Self {
        Grads { slots: vec![None; len] }
    }

    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self::new(store.len())
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.slots[id.0].as_ref()
    }

    pub(crate) fn slot(&mut self, id: ParamId, dim: Ix2) -> &mut Array2<T> {
        self.slots[id.0].get_or_insert_with(|| Array2::zeros(dim))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<T>) {
        match &mut self.slots[id.0] {
            Some(cur) => *cur += g,
            slot => *slot = Some(g.clone()),
        }
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: Grads<T>) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.slots[i] {
                    Some(cur) => *cur += &g,
                    slot => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

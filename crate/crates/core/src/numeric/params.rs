//! Named parameter store with one gradient buffer per parameter.
//!
//! Networks register matrices at build time and get back stable ids;
//! backward passes accumulate into the paired gradient buffers, which the
//! optimizer then consumes. Registration order is deterministic and is the
//! canonical order for checkpoints and optimizer state.

use super::matrix::Matrix;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) fn param_id_for_index(i: usize) -> ParamId {
    ParamId(i)
}

#[derive(Clone)]
struct Entry<S> {
    name: String,
    value: Matrix<S>,
    grad: Matrix<S>,
}

#[derive(Clone)]
pub struct ParamStore<S> {
    entries: Vec<Entry<S>>,
    by_name: BTreeMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers a named parameter; names must be unique within a store.
    pub fn register(&mut self, name: impl Into<String>, value: Matrix<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.entries.len());
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(Entry { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters across all matrices.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix<S> {
        &self.entries[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<S> {
        &mut self.entries[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &Matrix<S> {
        &self.entries[id.0].grad
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix<S> {
        &mut self.entries[id.0].grad
    }

    /// Accumulates `delta` into the gradient buffer of `id`.
    pub fn add_grad(&mut self, id: ParamId, delta: &Matrix<S>) {
        self.entries[id.0].grad.add_assign(delta);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(S::zero());
        }
    }

    /// Iterates (id, name, value) in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<S>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Squared L2 norm of all gradients together.
    pub fn grad_squared_norm(&self) -> S {
        self.entries.iter().map(|e| e.grad.squared_sum()).sum()
    }

    /// Multiplies every gradient by `s` (used by global norm clipping).
    pub fn scale_grads(&mut self, s: S) {
        for e in &mut self.entries {
            e.grad.scale(s);
        }
    }

    /// Copies parameter values from another store with identical layout.
    /// This is the target-network sync.
    pub fn copy_values_from(&mut self, src: &ParamStore<S>) {
        assert_eq!(
            self.entries.len(),
            src.entries.len(),
            "store layout mismatch in copy_values_from"
        );
        for (dst, s) in self.entries.iter_mut().zip(&src.entries) {
            assert_eq!(dst.name, s.name, "parameter name mismatch in copy_values_from");
            assert_eq!(dst.value.shape(), s.value.shape());
            dst.value = s.value.clone();
        }
    }

    /// First parameter whose gradient holds a non-finite entry, if any.
    pub fn find_non_finite_grad(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| !e.grad.is_finite())
            .map(|e| e.name.as_str())
    }

    /// First parameter whose value holds a non-finite entry, if any.
    pub fn find_non_finite_value(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| !e.value.is_finite())
            .map(|e| e.name.as_str())
    }
}

impl<S: Scalar > Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

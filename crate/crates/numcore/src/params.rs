//! Named parameter tensors with freeze flags.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{NumError, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::TensorBuffer;

/// A set of uniquely named parameter tensors. Frozen parameters are never
/// touched by the optimizer; the name order is the (deterministic) iteration
/// and serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<T> {
    tensors: BTreeMap<String, TensorBuffer<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            tensors: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// Inserts a tensor under a fresh name; duplicate names are an error.
    pub fn insert(&mut self, name: &str, tensor: TensorBuffer<T>) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(NumError::DuplicateParam(name.to_string()));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Weight matrix `[n_out, n_in]`, uniform in `±sqrt(6 / (n_in + n_out))`.
    pub fn add_weight(
        &mut self,
        name: &str,
        n_out: usize,
        n_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let values: Vec<T> = (0..n_out * n_in)
            .map(|_| cast::<T>(rng.random_range(-limit..limit)))
            .collect();
        self.insert(name, TensorBuffer::from_values(&[n_out, n_in], values)?)
    }

    /// Zero-initialized bias vector `[n]`.
    pub fn add_bias(&mut self, name: &str, n: usize) -> Result<()> {
        self.insert(name, TensorBuffer::zeros(&[n]))
    }

    pub fn get(&self, name: &str) -> Option<&TensorBuffer<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorBuffer<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorBuffer<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn require_mut(&mut self, name: &str) -> Result<&mut TensorBuffer<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Names in deterministic (sorted) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorBuffer<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        if !self.tensors.contains_key(name) {
            return Err(NumError::UnknownParam(name.to_string()));
        }
        if frozen {
            self.frozen.insert(name.to_string());
        } else {
            self.frozen.remove(name);
        }
        Ok(())
    }

    /// Freezes every parameter whose name starts with one of the prefixes,
    /// unfreezing everything else.
    pub fn freeze_by_prefix(&mut self, prefixes: &[&str]) {
        self.frozen = self
            .tensors
            .keys()
            .filter(|name| prefixes.iter().any(|p| name.starts_with(p)))
            .cloned()
            .collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    /// Names of trainable (non-frozen) parameters, sorted.
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| !self.frozen.contains(*n))
            .cloned()
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.frozen.iter().cloned().collect()
    }

    /// Total number of stored scalars.
    pub fn total_len(&self) -> usize {
        self.tensors.values().map(TensorBuffer::len).sum()
    }

    /// Sum of squared values over trainable parameters; the reported
    /// regularization term is `lambda * squared_norm`.
    pub fn trainable_squared_norm(&self) -> T {
        let mut acc = T::zero();
        for (name, t) in &self.tensors {
            if self.frozen.contains(name) {
                continue;
            }
            for &v in t.values() {
                acc = acc + v * v;
            }
        }
        acc
    }

    /// Bitwise equality of values for every name matching the prefix.
    pub fn values_bits_eq_by_prefix(&self, other: &Self, prefix: &str) -> bool {
        let mine: Vec<&str> = self
            .names()
            .filter(|n| n.starts_with(prefix))
            .collect();
        let theirs: Vec<&str> = other
            .names()
            .filter(|n| n.starts_with(prefix))
            .collect();
        if mine != theirs {
            return false;
        }
        mine.iter().all(|n| {
            self.tensors[*n].values_bits_eq(&other.tensors[*n])
        })
    }
}

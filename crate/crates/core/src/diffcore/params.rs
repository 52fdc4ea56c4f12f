use std::collections::BTreeMap;

use super::tensor::Tensor3;
use crate::error::{Error, Result};

/// Named tensor collection. Iteration order is lexicographic by name, which
/// keeps checkpoints and optimizer updates reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor3>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor3) {
        self.tensors.insert(name.into(), tensor.with_grad(true));
    }

    /// Inserts a tensor that takes part in evaluation but receives no gradient.
    pub fn insert_frozen(&mut self, name: impl Into<String>, tensor: Tensor3) {
        self.tensors.insert(name.into(), tensor.with_grad(false));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor3> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor3> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor3)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor3)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor3::len).sum()
    }
}

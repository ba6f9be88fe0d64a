//! Named parameter and batch-norm state stores.

use indexmap::IndexMap;

use crate::error::{Result, SeidError};
use crate::layers::BatchNormState;
use crate::tensor::Tensor;

/// Ordered name -> tensor map. Insertion order is the checkpoint layout order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| SeidError::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| SeidError::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn param_count(&self) -> usize {
        self.map.values().map(|t| t.elem_count()).sum()
    }

    /// Total scalar count over names starting with `prefix`.
    pub fn param_count_prefixed(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.elem_count())
            .sum()
    }
}

/// Batch-norm running statistics per layer name.
#[derive(Debug, Clone, Default)]
pub struct BnStore {
    map: IndexMap<String, BatchNormState>,
}

impl BnStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, state: BatchNormState) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), state);
        assert!(prev.is_none(), "duplicate batch-norm name {name}");
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut BatchNormState> {
        self.map
            .get_mut(name)
            .ok_or_else(|| SeidError::contract(format!("unknown batch-norm state {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BatchNormState)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut BatchNormState)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

//! Named parameter collections.

use crate::error::{Error, Result};
use ndarray::ArrayD;
use std::collections::BTreeMap;

/// A named map from parameter path to tensor.
///
/// Paths are hierarchical dotted names (`"enc.down0.res0.conv1.w"`). The
/// map is ordered by name so iteration, checkpointing, and optimizer
/// updates are deterministic. Insertion order (used when a network draws
/// its initial weights) is fixed by the network constructors, not by this
/// container.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor under a fresh path. Duplicate paths are a
    /// construction bug, not a recoverable condition.
    pub fn insert(&mut self, path: impl Into<String>, tensor: ArrayD<f64>) {
        let path = path.into();
        let prev = self.tensors.insert(path.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter path {path:?}");
    }

    pub fn get(&self, path: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::range("parameter path", format!("unknown path {path:?}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut ArrayD<f64>> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::range("parameter path", format!("unknown path {path:?}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Checks that `other` has identical paths and shapes (the contract
    /// between online parameters and their EMA shadow).
    pub fn validate_same_structure(&self, other: &ParameterSet) -> Result<()> {
        if self.tensor_count() != other.tensor_count() {
            return Err(Error::range(
                "parameter structure",
                format!("tensor count mismatch: {} vs {}", self.tensor_count(), other.tensor_count()),
            ));
        }
        for ((pa, ta), (pb, tb)) in self.iter().zip(other.iter()) {
            if pa != pb {
                return Err(Error::range("parameter structure", format!("path mismatch: {pa:?} vs {pb:?}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::shape(format!("parameter {pa}"), ta.shape(), tb.shape()));
            }
        }
        Ok(())
    }

    /// Moves every tensor into `target`, prefixing each path.
    pub fn merge_into(self, prefix: &str, target: &mut ParameterSet) {
        for (path, tensor) in self.tensors {
            target.insert(format!("{prefix}{path}"), tensor);
        }
    }

    pub fn from_tensors(tensors: BTreeMap<String, ArrayD<f64>>) -> Self {
        ParameterSet { tensors }
    }

    pub fn into_tensors(self) -> BTreeMap<String, ArrayD<f64>> {
        self.tensors
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn count_is_deterministic() {
        let mut p = ParameterSet::new();
        p.insert("a.w", ArrayD::zeros(IxDyn(&[2, 3])));
        p.insert("a.b", ArrayD::zeros(IxDyn(&[3])));
        assert_eq!(p.param_count(), 9);
        assert_eq!(p.tensor_count(), 2);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter path")]
    fn duplicate_path_panics() {
        let mut p = ParameterSet::new();
        p.insert("w", ArrayD::zeros(IxDyn(&[1])));
        p.insert("w", ArrayD::zeros(IxDyn(&[1])));
    }

    #[test]
    fn structure_validation_catches_shape_drift() {
        let mut a = ParameterSet::new();
        a.insert("w", ArrayD::zeros(IxDyn(&[2])));
        let mut b = ParameterSet::new();
        b.insert("w", ArrayD::zeros(IxDyn(&[3])));
        assert!(a.validate_same_structure(&b).is_err());
        let mut c = ParameterSet::new();
        c.insert("w", ArrayD::zeros(IxDyn(&[2])));
        assert!(a.validate_same_structure(&c).is_ok());
    }
}

//! Named parameter store and its per-tape binding.
//!
//! A [`Weights`] map owns the persistent parameter tensors. Each forward
//! episode binds the paths it touches into the tape as leaves exactly once,
//! so a parameter used at several sites (the shared encoder, say) is one
//! node whose gradient sums over all uses.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct Weights<T: Scalar> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Weights<T> {
    pub fn new() -> Self {
        Weights {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Structure(format!("duplicate parameter path {path:?}")));
        }
        self.entries.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Paths in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total element count over all entries.
    pub fn count_parameters(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }
}

/// Source of parameter nodes during graph construction. The production
/// implementation is [`Binder`]; the gradient checker substitutes a table
/// of pre-created leaves.
pub trait ParamSource<T: Scalar> {
    fn get(&mut self, tape: &mut Tape<T>, path: &str) -> Result<NodeId>;
}

/// Fixed table of already-created leaf nodes, keyed by path.
#[derive(Clone, Debug, Default)]
pub struct LeafTable {
    entries: Vec<(String, NodeId)>,
}

impl LeafTable {
    pub fn new(entries: Vec<(String, NodeId)>) -> Self {
        LeafTable { entries }
    }
}

impl<T: Scalar> ParamSource<T> for LeafTable {
    fn get(&mut self, _tape: &mut Tape<T>, path: &str) -> Result<NodeId> {
        self.entries
            .iter()
            .find(|(p, _)| p == path)
            .map(|&(_, id)| id)
            .ok_or_else(|| Error::Structure(format!("missing parameter {path:?}")))
    }
}

/// Binds weight paths into one tape episode.
pub struct Binder<'w, T: Scalar> {
    weights: &'w Weights<T>,
    trainable: bool,
    bound: IndexMap<String, NodeId>,
}

impl<'w, T: Scalar> Binder<'w, T> {
    pub fn new(weights: &'w Weights<T>, trainable: bool) -> Self {
        Binder {
            weights,
            trainable,
            bound: IndexMap::new(),
        }
    }

    /// Node for a parameter path, creating the leaf on first use.
    pub fn get(&mut self, tape: &mut Tape<T>, path: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(path) {
            return Ok(id);
        }
        let tensor = self
            .weights
            .get(path)
            .ok_or_else(|| Error::Structure(format!("missing parameter {path:?}")))?;
        let id = tape.leaf(tensor.clone(), self.trainable);
        self.bound.insert(path.to_string(), id);
        Ok(id)
    }

    /// Gradient tensors by path after a backward pass, in first-use order.
    pub fn grad_map<'t>(&self, tape: &'t Tape<T>) -> Vec<(String, &'t Tensor<T>)> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g)))
            .collect()
    }

    /// (path, node) pairs bound so far, in first-use order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of all bound parameters after a backward pass.
    pub fn grads<'t>(&self, tape: &'t Tape<T>) -> Vec<(&str, &'t Tensor<T>)> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.as_str(), g)))
            .collect()
    }
}

impl<T: Scalar> ParamSource<T> for Binder<'_, T> {
    fn get(&mut self, tape: &mut Tape<T>, path: &str) -> Result<NodeId> {
        Binder::get(self, tape, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_map_has_zero_parameters() {
        assert_eq!(Weights::<f32>::new().count_parameters(), 0);
    }

    #[test]
    fn conv_with_bias_counts_2320() {
        // 16x16x3x3 kernel plus 16 biases.
        let mut w = Weights::<f32>::new();
        w.insert("conv.w", Tensor::zeros(16, 16, 3, 3)).unwrap();
        w.insert("conv.b", Tensor::zeros(1, 16, 1, 1)).unwrap();
        assert_eq!(w.count_parameters(), 16 * 16 * 9 + 16);
        assert_eq!(w.count_parameters(), 2320);
    }

    #[test]
    fn duplicate_path_rejected() {
        let mut w = Weights::<f32>::new();
        w.insert("a", Tensor::zeros(1, 1, 1, 1)).unwrap();
        assert!(w.insert("a", Tensor::zeros(1, 1, 1, 1)).is_err());
    }

    #[test]
    fn binder_reuses_one_leaf_per_path() {
        let mut w = Weights::<f64>::new();
        w.insert("p", Tensor::filled(1, 1, 1, 1, 2.0)).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&w, true);
        let a = binder.get(&mut tape, "p").unwrap();
        let b = binder.get(&mut tape, "p").unwrap();
        assert_eq!(a, b);
        assert!(binder.get(&mut tape, "q").is_err());
    }
}

//! Named parameter collection.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Names ending in these suffixes are batch-norm running statistics: stored and
/// checkpointed with the weights but never touched by the optimizer.
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| invalid!("no parameter named `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| invalid!("no parameter named `{name}`"))
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

    /// All tensors in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter().filter(|(k, _)| !is_buffer(k))
    }

    pub fn num_scalars(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces every tensor from `other`, requiring identical names and shapes.
    pub fn load(&mut self, other: ParamStore) -> Result<()> {
        if other.tensors.len() != self.tensors.len() {
            return Err(invalid!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                other.tensors.len()
            ));
        }
        for (name, t) in &other.tensors {
            let mine = self.get(name)?;
            if mine.shape() != t.shape() {
                return Err(invalid!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    mine.shape()
                ));
            }
        }
        self.tensors = other.tensors;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_are_not_trainable() {
        let mut p = ParamStore::new();
        p.insert("bn.gamma", Tensor::full(&[2], 1.0));
        p.insert("bn.running_mean", Tensor::zeros(&[2]));
        p.insert("bn.running_var", Tensor::full(&[2], 1.0));
        let names: Vec<_> = p.trainable().map(|(k, _)| k.as_str()).collect();
        assert_eq!(names, ["bn.gamma"]);
        assert_eq!(p.num_scalars(), 2);
    }

    #[test]
    fn load_checks_shapes() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(&[2]));
        let mut q = ParamStore::new();
        q.insert("w", Tensor::zeros(&[3]));
        assert!(p.load(q).is_err());
    }
}

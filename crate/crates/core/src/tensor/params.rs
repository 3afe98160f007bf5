//! Named parameter collections.

use indexmap::IndexMap;

use super::{Gradients, Real, Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Ordered map from parameter name to tensor. Tensors with
/// `requires_grad == false` are buffers (e.g. batch-norm running
/// statistics) or frozen parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        match self.tensors.get(name) {
            Some(t) => Ok(t),
            None => bail!(Param, "missing parameter '{name}'"),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of scalar values across trainable tensors.
    pub fn trainable_numel(&self) -> usize {
        self.tensors.values().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// True when both sets have the same names, in order, with equal shapes.
    pub fn same_schema(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Puts every tensor on `tape`. With `trainable == false` all of them
    /// are registered as constants, so nothing upstream of them can ever
    /// receive a gradient.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let t = v.clone().with_requires_grad(trainable && v.requires_grad());
                (k.clone(), tape.leaf(t))
            })
            .collect();
        ParamVars { vars }
    }

    /// Copies gradients for every trainable tensor out of `grads`, zero-filling
    /// the ones the loss did not reach.
    pub fn store_grads(&mut self, tape: &Tape<T>, vars: &ParamVars, grads: &Gradients<T>) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let v = vars.get(name)?;
            t.set_grad(grads.get_or_zeros(tape, v))?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }
}

/// Tape handles for a registered [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(&v) => Ok(v),
            None => bail!(Param, "parameter '{name}' is not registered on this tape"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

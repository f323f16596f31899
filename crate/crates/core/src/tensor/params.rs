//! Ordered, named parameter collections shared by the models, the
//! optimizer, and the checkpoint container.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Named tensors in a fixed order. Iteration order is the binding and
/// checkpoint order, so it must stay stable across runs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Place every parameter on `tape`, in order.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Collect gradients from bound variables, in parameter order.
    pub fn grads(&self, bound: &[Var]) -> Result<Vec<Tensor>> {
        assert_eq!(bound.len(), self.entries.len());
        bound
            .iter()
            .zip(&self.entries)
            .enumerate()
            .map(|(index, (v, (name, _)))| {
                v.grad().ok_or_else(|| TensorError::MissingGrad {
                    index,
                    name: name.clone(),
                })
            })
            .collect()
    }
}

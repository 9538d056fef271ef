//! Named parameter registry plus the per-forward binding of parameters to
//! tape leaves.

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered store of named, trainable tensors. Insertion order is fixed by
/// model construction and drives optimizer state and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Owned name/tensor pairs in insertion order, for checkpointing.
    pub fn to_named_vec(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    /// Replace values by name, shape-checked; used by checkpoint loading.
    pub fn load_named(&mut self, loaded: &[(String, Tensor)]) -> Result<(), TensorError> {
        for (name, tensor) in loaded {
            let idx = self.names.iter().position(|n| n == name).ok_or_else(|| {
                TensorError::ShapeMismatch {
                    op: "load_named",
                    detail: format!("unknown parameter `{name}`"),
                }
            })?;
            if self.tensors[idx].shape() != tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_named",
                    detail: format!(
                        "parameter `{name}`: stored {:?}, expected {:?}",
                        tensor.shape(),
                        self.tensors[idx].shape()
                    ),
                });
            }
            self.tensors[idx] = tensor.clone();
        }
        Ok(())
    }
}

/// Per-forward cache mapping parameters to tape leaves, so each parameter is
/// bound at most once per tape and its gradient can be collected afterwards.
#[derive(Debug)]
pub struct Binder {
    vars: Vec<Option<Var>>,
}

impl Binder {
    pub fn new(params: &Params) -> Self {
        Binder {
            vars: vec![None; params.len()],
        }
    }

    pub fn var(&mut self, tape: &mut Tape, params: &Params, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(params.get(id).clone(), true);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients in parameter order after a backward pass; `None` for
    /// parameters not touched by this tape.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .map(|slot| slot.and_then(|v| tape.grad(v).cloned()))
            .collect()
    }
}

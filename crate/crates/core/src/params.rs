//! Named parameter tensors with trainability metadata.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::tensor::Tensor;

/// Identity of a parameter inside a model, stable across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKey {
    /// Q-Former base weights (including query embeddings).
    Base(usize),
    /// Classification head.
    Head(usize),
    /// Adapter factors.
    Adapter(usize),
}

/// One trainable-or-frozen tensor.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    /// Decoupled weight decay applies (false for biases and layer norms).
    pub decay: bool,
    /// Per-element freeze mask; `false` entries are skipped by the optimizer.
    pub update_mask: Option<Vec<bool>>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> Self {
        Self {
            name: name.into(),
            tensor,
            trainable: true,
            decay,
            update_mask: None,
        }
    }

    pub fn is_updatable(&self, i: usize) -> bool {
        self.update_mask.as_ref().is_none_or(|m| m[i])
    }

    /// Number of elements an optimizer may change.
    pub fn trainable_count(&self) -> usize {
        if self.trainable {
            self.tensor.numel()
        } else {
            0
        }
    }
}

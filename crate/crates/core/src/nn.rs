//! Named parameter storage and dense-layer helpers shared by the networks.

use std::collections::BTreeMap;

use rand::{Rng, RngExt};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::bodymodel::BodyError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Body(#[from] BodyError),
}

/// All trainable tensors, keyed by checkpoint name. Iteration order is the
/// sorted name order, which keeps updates and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        t.set_requires_grad(true);
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.tensors.get_mut(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every tensor on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|(n, t)| (n.clone(), tape.leaf(t))).collect(),
        }
    }

    /// Adds the tape's gradients into each tensor's accumulated gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<(), ModelError> {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(g) = bound.vars.get(name).and_then(|&v| tape.grad(v)) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }
}

/// Tape handles for a [`ParamSet`] bound to one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }
}

/// Weight `[fan_in, fan_out]` and bias `[fan_out]` under `{name}.w`, `{name}.b`.
/// Weights are He-uniform unless `zero` is set; biases start at zero.
pub fn init_dense<R: Rng>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut R) {
    let bound = (6.0 / fan_in as f64).sqrt();
    let w: Vec<f64> = if zero {
        vec![0.0; fan_in * fan_out]
    } else {
        (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect()
    };
    params.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("sized"));
    params.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
}

/// `x · W + b` using the parameters registered under `name`.
pub fn dense(tape: &mut Tape, bound: &BoundParams, name: &str, x: Var) -> Result<Var, ModelError> {
    let w = bound.get(&format!("{name}.w"))?;
    let b = bound.get(&format!("{name}.b"))?;
    Ok(tape.linear(x, w, b)?)
}

//! Named parameter storage, decoupled from any single tape.
//!
//! Parameter values persist across training steps; each forward pass binds
//! them onto a fresh tape (trainable ones as differentiable leaves, frozen
//! ones as constants). Registration order is stable, which keeps optimizer
//! state, checkpoints and reports deterministic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor};

/// Stable handle to one parameter in a [`ParamSet`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named tensor of persistent values.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// All parameters of a model, in registration order.
#[derive(Default, Clone)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        values: Vec<f64>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::Contract(format!(
                "param {name}: shape {shape:?} implies {expect} values, got {}",
                values.len()
            )));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name: {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, shape, values, trainable });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }
}

/// Per-forward-pass tensors for every parameter in a set, index-aligned.
pub struct Bindings {
    tensors: Vec<Tensor>,
}

impl Bindings {
    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Gradient buffers per parameter, index-aligned with the set.
    /// `None` for frozen parameters and for trainable ones the loss never
    /// reached.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.tensors.iter().map(|t| grads.wrt(t).map(|g| g.to_vec())).collect()
    }
}

/// Bind a parameter set onto a tape. With `with_grad` false every parameter
/// becomes a constant, which skips tape recording entirely (used by
/// evaluation).
pub fn bind(tape: &Tape, set: &ParamSet, with_grad: bool) -> Result<Bindings> {
    let mut tensors = Vec::with_capacity(set.len());
    for (_, p) in set.iter() {
        let t = if with_grad && p.trainable {
            tape.leaf(p.shape.clone(), p.values.clone())?
        } else {
            Tensor::constant(p.shape.clone(), p.values.clone())?
        };
        tensors.push(t);
    }
    Ok(Bindings { tensors })
}

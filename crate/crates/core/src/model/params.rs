use std::ops::Index;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Order is creation order and is part
/// of the checkpoint contract.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every tensor of a [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Bound(pub Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
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

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(flag));
    }

    /// Record every tensor as a tape leaf; trainable tensors track gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t)).collect())
    }

    /// Accumulate gradients from a backward pass into each tensor's `grad`.
    pub fn absorb_grads(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Replace tensor values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Version(format!(
                "parameter table has {} entries, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (i, (name, t)) in other.iter().enumerate() {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Version(format!("unknown parameter '{name}'")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(Error::dim(format!(
                    "parameter '{name}' has shape {:?} in the file but {:?} in the model",
                    t.shape(),
                    dst.shape()
                )));
            }
            if id.0 != i {
                return Err(Error::Version(format!("parameter '{name}' out of order")));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Weight initialization for [`Linear`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(3 / fan_in) * gain` (unit-variance preserving).
    Uniform { gain: f64 },
    /// Weights and bias exactly zero.
    Zero,
}

impl Init {
    pub const DEFAULT: Init = Init::Uniform { gain: 1.0 };
}

/// Affine map over the last axis: `x · w + b`, with `w` of shape `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let mut w = Tensor::zeros(&[fan_in, fan_out]);
        if let Init::Uniform { gain } = init {
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            w.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.uniform_range(-bound, bound));
        }
        let w = params.add(format!("{name}.w"), w.with_requires_grad(true));
        let b = bias.then(|| {
            params.add(
                format!("{name}.b"),
                Tensor::zeros(&[fan_out]).with_requires_grad(true),
            )
        });
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound[self.w], self.b.map(|b| bound[b]))
    }

    pub fn num_scalars(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }
}

/// Bind a frozen parameter set: values enter the tape as constants.
pub fn bind_frozen(params: &ParamSet, tape: &mut Tape) -> Bound {
    Bound(params.tensors.iter().map(|t| tape.constant(t.clone())).collect())
}

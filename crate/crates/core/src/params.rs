//! Named learnable parameters and their binding onto a tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_grad(true));
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces every parameter's values with those of `other`, which must hold
    /// identically named and shaped tensors in the same order.
    pub fn load_values(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for ((name, t), (oname, ot)) in self.names.iter().zip(self.tensors.iter_mut()).zip(other) {
            if name != oname || t.shape() != ot.shape() {
                return Err(Error::Format(format!(
                    "parameter {oname} {:?} does not match {name} {:?}",
                    ot.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(ot.data());
        }
        Ok(())
    }

    /// Adds the gradients collected on `tape` for each bound parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, binding: &Binding) -> Result<()> {
        for (t, var) in self.tensors.iter_mut().zip(&binding.vars) {
            if let Some(g) = var.and_then(|v| tape.grad(v)) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Tape variables created for parameters during one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

/// Forward-pass context: a tape plus lazily bound parameters.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    params: &'a ParamStore,
    binding: Binding,
    trainable: bool,
}

impl<'a> Forward<'a> {
    /// `trainable` controls whether parameter leaves request gradients.
    pub fn new(tape: &'a mut Tape, params: &'a ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            params,
            binding: Binding {
                vars: vec![None; params.len()],
            },
            trainable,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.binding.vars[id.0] {
            return v;
        }
        let t = self.params.get(id).detach().with_grad(self.trainable);
        let v = self.tape.leaf(t);
        self.binding.vars[id.0] = Some(v);
        v
    }

    pub fn binding(&self) -> &Binding {
        &self.binding
    }

    pub fn into_binding(self) -> Binding {
        self.binding
    }
}

/// Kaiming-uniform (fan-in, ReLU gain) initial weights.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

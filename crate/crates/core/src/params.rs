use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::Gradients;
use crate::tensor::{DefaultReal, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Real = DefaultReal> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named, ordered collection of trainable tensors. Registration order is the
/// enumeration order used by checkpoints, summaries and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Real = DefaultReal> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::arg(format!("duplicate parameter name `{name}`")));
        }
        if !tensor.requires_grad() {
            tensor.set_requires_grad(true);
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, tensor });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the parameter gradients of a finished backward pass into each
    /// parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            self.params
                .get_mut(id.0)
                .ok_or_else(|| Error::arg(format!("gradient for unknown parameter #{}", id.0)))?
                .tensor
                .accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Copies values (not gradients) from another set with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape("parameter sets differ in length"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::shape(format!("parameter `{}` does not match `{}`", dst.name, src.name)));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

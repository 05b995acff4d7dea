use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid, shape_err, Error, Result};
use crate::Scalar;

use super::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub trainable: bool,
    /// Non-learned state such as running statistics.
    pub buffer: bool,
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Owns every learnable tensor of a model.
///
/// Each store has an identity so that a graph mixing several stores routes
/// gradients back to the right one; clones share it.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    id: u64,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
            buffer: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
            trainable: false,
            buffer: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Ids of learnable tensors.
    pub fn learnable(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.buffer).map(|(id, _)| id).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable && !p.buffer;
    }

    /// Replaces a value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Migration(format!(
                "{}: stored shape {:?}, incoming {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Replaces a value and its shape (used when widening layers).
    pub fn replace(&mut self, id: ParamId, value: Tensor<T>) {
        let p = &mut self.params[id.0];
        p.value = value;
        p.grad = None;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients held by parameter leaves of `graph`.
    pub fn absorb_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        for (id, grad) in graph.param_grads(self.id) {
            let p = self
                .params
                .get_mut(id.0)
                .ok_or_else(|| invalid("graph references an unknown parameter"))?;
            if grad.len() != p.value.len() {
                return Err(shape_err(p.value.shape(), &[grad.len()]));
            }
            match &mut p.grad {
                Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += *b),
                None => p.grad = Some(grad.to_vec()),
            }
        }
        Ok(())
    }
}

//! Named parameter tensors and their gradients.
//!
//! Only static parameters and the parameter prediction network live here.
//! The question-specific weights of the dynamic layer are derived per call
//! and never stored.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Part of the classification network, trained directly.
    Static,
    /// Part of the parameter prediction network, whose output feeds the
    /// dynamic layer.
    DynamicProducing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub tensor: Tensor<S>,
    pub kind: ParamKind,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: IndexMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(
            name,
            Param {
                tensor,
                kind,
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.param(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a tensor, keeping its kind and frozen flag. Shapes must agree.
    pub fn set(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape("param_set", slot.shape(), tensor.shape()));
        }
        *slot = tensor;
        Ok(())
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    /// Returns how many were touched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (name, p) in &mut self.params {
            if name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            kind: p.kind,
                            frozen: p.frozen,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Gradients keyed by parameter name, in the store's order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<S> {
    grads: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(n, p)| (n.to_string(), Tensor::zeros(p.tensor.shape())))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor<S>) -> Result<()> {
        let slot = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.len() != grad.len() {
            return Err(Error::shape("grad_accumulate", slot.shape(), grad.shape()));
        }
        for (a, &b) in slot.data_mut().iter_mut().zip(grad.data()) {
            *a += b;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.grads
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn global_norm(&self) -> S {
        self.grads
            .values()
            .fold(S::zero(), |acc, t| acc + t.sum_squares())
            .sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for t in self.grads.values_mut() {
            t.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

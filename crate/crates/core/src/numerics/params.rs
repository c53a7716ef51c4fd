use std::collections::HashMap;

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named trainable tensors with their gradient slots.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, grad: None });
        Ok(id)
    }

    /// Uniform(-scale, scale) initialisation.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-scale..scale))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, T::of(v)))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).copied().ok_or_else(|| Error::Lookup { kind: "parameter", name: name.to_string() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Reset every gradient slot to zeros of the parameter's shape.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            match &mut e.grad {
                Some(g) => g.fill(T::zero()),
                None => e.grad = Some(Tensor::zeros(e.value.shape())),
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if g.len() != e.value.len() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} values, parameter has {}",
                e.name,
                g.len(),
                e.value.len()
            )));
        }
        match &mut e.grad {
            Some(acc) => acc.add_assign(g),
            None => {
                let mut t = Tensor::zeros(e.value.shape());
                t.add_assign(g);
                e.grad = Some(t);
            }
        }
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn scale_grads(&mut self, s: T) {
        for g in self.entries.iter_mut().filter_map(|e| e.grad.as_mut()) {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn grad_norm(&self) -> T {
        self.entries.iter().filter_map(|e| e.grad.as_ref()).map(|g| g.sum_sq()).fold(T::zero(), |a, b| a + b).sqrt()
    }

    /// Rescale gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm > T::zero() {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// Same parameters in another precision; gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), grad: None })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn bit_equal(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    name: String,
    value: Arc<Tensor<T>>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    /// Rows (first axis) whose gradient is always discarded.
    pinned_rows: Vec<usize>,
}

impl<T: Float> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    /// Mutable access; clones the buffer if a live graph still shares it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    /// Simultaneous mutable value and shared gradient access.
    pub fn value_and_grad(&mut self) -> (&mut Tensor<T>, Option<&Tensor<T>>) {
        (Arc::make_mut(&mut self.value), self.grad.as_ref())
    }

    pub fn grad_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.grad.as_mut()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn pinned_rows(&self) -> &[usize] {
        &self.pinned_rows
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub(crate) fn accumulate(&mut self, grad: &Tensor<T>) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(shape_err("accumulate_grad", self.value.shape(), grad.shape()));
        }
        let mut incoming = grad.clone();
        if !self.pinned_rows.is_empty() {
            let width = incoming.numel() / self.value.shape()[0].max(1);
            for &r in &self.pinned_rows {
                incoming.data_mut()[r * width..(r + 1) * width]
                    .iter_mut()
                    .for_each(|x| *x = T::zero());
            }
        }
        match &mut self.grad {
            Some(g) => g.add_assign(&incoming)?,
            None => self.grad = Some(incoming),
        }
        Ok(())
    }
}

/// Owns every learnable tensor of a model, addressed by [`ParamId`].
///
/// Insertion order is preserved and defines the canonical parameter order
/// used by optimizers and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad: None,
            requires_grad: true,
            pinned_rows: Vec::new(),
        });
        Ok(id)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.params[id.0].value()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.params[id.0].value_mut()
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].grad()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn set_requires_grad(&mut self, id: ParamId, requires_grad: bool) {
        self.params[id.0].requires_grad = requires_grad;
        if !requires_grad {
            self.params[id.0].grad = None;
        }
    }

    pub fn pin_rows(&mut self, id: ParamId, rows: &[usize]) {
        self.params[id.0].pinned_rows = rows.to_vec();
    }

    /// Resets every existing gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.fill(T::zero());
            }
        }
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.numel())
            .sum()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        self.params[id.0].accumulate(grad)
    }

    /// Copies the values (not gradients) of `other` into this store. Both
    /// stores must hold identically named and shaped parameters.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::Contract(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(shape_err("load_values_from", dst.value.shape(), src.value.shape()));
            }
            dst.value = Arc::clone(&src.value);
        }
        Ok(())
    }

    /// Element-type conversion; gradients are dropped.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    grad: None,
                    requires_grad: p.requires_grad,
                    pinned_rows: p.pinned_rows.clone(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Normal(0, std) samples truncated to ±2 std by rejection.
pub fn truncated_normal<T: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            data.push(T::of_f64(x));
        }
    }
    Tensor::new(shape, data).expect("length matches shape")
}

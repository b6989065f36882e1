//! Named parameter storage, tape binding and initialisers.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors owned by one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Overwrites every parameter from `(name, tensor)` pairs; all names must be
    /// present with matching shapes.
    pub fn load<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<()> {
        let mut seen = alloc::vec![false; self.len()];
        for (name, t) in entries {
            let Some(id) = self.find(name) else { continue };
            if self.values[id.0].shape() != t.shape() {
                return Err(Error::Shape(alloc::format!(
                    "parameter {name}: stored {:?}, loaded {:?}",
                    self.values[id.0].shape(),
                    t.shape()
                )));
            }
            self.values[id.0] = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(alloc::format!("missing parameter {}", self.names[i])));
        }
        Ok(())
    }

    /// Registers every parameter as a leaf. Frozen stores become constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, e.g. gradient-check leaves standing in for a store.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order.
    pub fn grads<T: Real>(&self, g: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Real>(grads: &[Option<Tensor<T>>]) -> T {
    grads
        .iter()
        .flatten()
        .flat_map(|t| t.data().iter())
        .map(|&v| v * v)
        .sum::<T>()
        .sqrt()
}

/// Rescales the gradient set so its global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: T) -> T {
    let n = grad_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        for t in grads.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    n
}

pub mod init {
    use super::*;

    pub fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Uniform `±sqrt(1/fan_in)`, the usual default for linear and conv layers.
    pub fn fan_in<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
        uniform(rng, shape, num_traits::Float::sqrt(1.0 / fan_in.max(1) as f64))
    }
}

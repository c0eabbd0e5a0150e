use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered, named collection of parameters. Insertion order is the
/// serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    /// Adds a `[rows, cols]` parameter drawn from N(0, std²).
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::from_parts(alloc::vec![rows, cols], data))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        self.accumulate_scaled(grads, 1.0)
    }

    pub fn accumulate_scaled(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (id, g) in grads.params() {
            let p = self
                .params
                .get_mut(id.0)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {}", id.0)))?;
            if p.grad.numel() != g.numel() {
                return Err(shape_err("accumulate", format!("{}: {:?} vs {:?}", p.name, p.grad.shape(), g.shape())));
            }
            for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *dst += scale * src;
            }
        }
        Ok(())
    }

    /// Copies values (not gradients) from another store with the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter count {} vs {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(shape_err(
                    "load_values",
                    format!("{} {:?} vs {} {:?}", dst.name, dst.value.shape(), src.name, src.value.shape()),
                ));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

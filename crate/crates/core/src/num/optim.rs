use alloc::format;
use alloc::vec::Vec;

use super::math;
use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.len() {
            return Err(shape_err("adam", format!("{} moment buffers for {} params", self.m.len(), store.len())));
        }
        for (i, (_, p)) in store.iter().enumerate() {
            if p.grad.shape() != self.m[i].shape() {
                return Err(shape_err("adam", format!("{}: {:?} vs {:?}", p.name, p.grad.shape(), self.m[i].shape())));
            }
            if !p.grad.is_finite() {
                return Err(Error::NonFinite { op: "adam gradient" });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for k in 0..grad.len() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

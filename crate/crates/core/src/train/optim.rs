//! AdamW with decoupled weight decay and bias correction.

use crate::error::{Error, Result};
use crate::params::{Grads, Kind, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Float> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.slots().iter().map(|s| Tensor::zeros_like(&s.value)).collect();
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One update of every learnable slot; buffers are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("optimizer tracks {} slots, store has {}", self.m.len(), store.len()),
            ));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.slot(id).kind != Kind::Learnable {
                continue;
            }
            let g = grads.get(id);
            let i = id.index();
            let theta = store.get_mut(id);
            if g.shape() != theta.shape() || self.m[i].shape() != theta.shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("gradient {:?} vs parameter {:?}", g.shape(), theta.shape()),
                ));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, p) in theta.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k].as_f64();
                let mk = c.beta1 * m[k].as_f64() + (1.0 - c.beta1) * gk;
                let vk = c.beta2 * v[k].as_f64() + (1.0 - c.beta2) * gk * gk;
                m[k] = T::of(mk);
                v[k] = T::of(vk);
                let update = c.lr * (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
                *p = T::of(p.as_f64() * decay - update);
            }
        }
        Ok(())
    }
}

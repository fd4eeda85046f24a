//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::ParamSet;

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
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    /// First moments, one vector per parameter tensor.
    pub m: Vec<Vec<f64>>,
    /// Second moments.
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every trainable tensor from its stored gradient.
    /// Frozen tensors (`requires_grad == false`) are skipped.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.m.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for &id in &ids {
            let t = params.get(id);
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::contract(format!("no gradient for parameter '{}'", params.name(id))));
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in ids {
            let t = params.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_default();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
            }
        }
        Ok(())
    }
}

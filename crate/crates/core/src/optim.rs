//! Adam with a stepwise-decayed learning rate.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `base · factor^⌊iteration / interval⌋`.
pub fn lr_at(iteration: u64, base: f64, factor: f64, interval: u64) -> f64 {
    if interval == 0 {
        return base;
    }
    base * factor.powi((iteration / interval) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.9,
            decay_interval: 2000,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, iteration: u64) -> f64 {
        lr_at(iteration, self.lr, self.decay_factor, self.decay_interval)
    }
}

/// First/second moments per parameter and the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: BTreeMap<_, _> = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update of every parameter at learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        for name in params.names() {
            match grads.get(name) {
                Some(g) => params.get(name)?.same_shape(g, "adam_step")?,
                None => return Err(Error::InvalidArgument(format!("adam_step: missing gradient for {name}"))),
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = grads.get(&name).expect("checked above").data();
            let m = self.m.get_mut(&name).ok_or_else(|| Error::InvalidArgument(format!("no moment for {name}")))?;
            let v = self.v.get_mut(&name).ok_or_else(|| Error::InvalidArgument(format!("no moment for {name}")))?;
            let p = params.get_mut(&name).expect("name from store");
            let mut md = m.data().to_vec();
            let mut vd = v.data().to_vec();
            let mut pd = p.data().to_vec();
            for i in 0..pd.len() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g[i];
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
            *m = Tensor::new(m.shape(), md)?;
            *v = Tensor::new(v.shape(), vd)?;
            *p = Tensor::new(p.shape(), pd)?;
        }
        Ok(())
    }
}

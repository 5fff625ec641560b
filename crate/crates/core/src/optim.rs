//! Adam with a continuous exponential learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr0: f64,
    pub decay_steps: u64,
    pub decay_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr0: 1e-2,
            decay_steps: 150,
            decay_rate: 0.96,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// `lr0 * decay_rate^(step / decay_steps)`, not staircased.
    pub fn lr(&self, step: u64) -> f64 {
        self.lr0 * self.decay_rate.powf(step as f64 / self.decay_steps as f64)
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr(self.step)
    }

    /// One bias-corrected Adam update of every parameter, then zeroes grads.
    ///
    /// Fails without touching anything if a parameter has no gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.value.grad().is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        let c = self.config;
        let lr = c.lr(self.step);
        let t = (self.step + 1) as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.value.grad().expect("checked above").to_vec();
            let data = p.value.data_mut();
            for i in 0..data.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            p.value.zero_grad();
        }
        self.step += 1;
        Ok(())
    }
}

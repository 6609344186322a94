//! Adam over the trainable entries of a [`ParamSet`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    /// Allocates first and second moments for trainable parameters only.
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let moments = params
            .trainable()
            .map(|(name, t)| (name.to_string(), (vec![0.0; t.numel()], vec![0.0; t.numel()])))
            .collect();
        Adam { config, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Number of `f64` moment slots held.
    pub fn state_len(&self) -> usize {
        self.moments.values().map(|(m, v)| m.len() + v.len()).sum()
    }

    pub fn tracks(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// One bias-corrected update from the accumulated gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, tensor) in params.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let Some((m, v)) = self.moments.get_mut(name) else {
                return Err(Error::InvalidConfig(format!("optimizer has no state for `{name}`")));
            };
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((w, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

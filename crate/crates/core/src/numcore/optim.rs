use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tape::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; every parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::shape("optimizer state does not match parameter store"));
        }
        if let Some((_, name, _)) = store.iter().find(|(_, _, t)| t.grad().is_none()) {
            return Err(Error::validation(format!("parameter {name} has no gradient")));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((t, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = t.grad().expect("checked above").to_vec();
            for (((x, gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

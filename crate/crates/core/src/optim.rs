//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{MqError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || -> Vec<Tensor> { store.iter().map(|p| Tensor::zeros(p.value.shape())).collect() };
        AdamState {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Changes the learning rate; moment estimates are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update from the gradients currently held in `store`. Gradients
    /// are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(MqError::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if m.shape() != p.value.shape() {
                return Err(MqError::shape("adam", m.shape(), p.value.shape()));
            }
            let grads = p.gradient.data();
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![v])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = scalar_store(1.25);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.25]);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // after bias correction mhat = g and vhat = g^2
        let g = 0.37;
        let mut s = scalar_store(2.0);
        s.iter_mut().next().unwrap().gradient.data_mut()[0] = g;
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s).unwrap();
        let expected = 2.0 - 1e-3 * g / (g + 1e-8);
        let got = s.iter().next().unwrap().value.data()[0];
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
        assert!(((2.0 - got) - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn two_steps_match_scalar_loop() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let grads = [0.8, -0.3];
        let mut s = scalar_store(0.5);
        let mut adam = AdamState::new(&s, cfg);
        for &g in &grads {
            s.iter_mut().next().unwrap().gradient.data_mut()[0] = g;
            adam.step(&mut s).unwrap();
        }

        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        let got = s.iter().next().unwrap().value.data()[0];
        assert!((got - w).abs() < 1e-12);
    }
}

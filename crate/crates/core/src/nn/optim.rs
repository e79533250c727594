use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// pix2pix-style GAN settings.
    pub const GAN: AdamConfig = AdamConfig { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 };

    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::GAN
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.m.is_empty() {
            for p in store.iter() {
                let n = if p.trainable { p.len() } else { 0 };
                self.m.push(vec![T::zero(); n]);
                self.v.push(vec![T::zero(); n]);
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - b1.powi(self.step);
        let bc2 = T::one() - b2.powi(self.step);
        let lr = T::of(c.learning_rate);
        let eps = T::of(c.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                p.grad[i] = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w".into(), vec![2], vec![1.0, -1.0], true);
        store.get_mut(id).grad = vec![3.0, -0.5];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut store);
        let w = store.value(id);
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.get(id).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w".into(), vec![1], vec![5.0], true);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let w = store.value(id)[0];
            store.get_mut(id).grad[0] = 2.0 * (w - 2.0);
            adam.step(&mut store);
        }
        assert!((store.value(id)[0] - 2.0).abs() < 1e-2);
    }
}

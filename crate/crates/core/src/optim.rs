//! Bias-corrected Adam over the unfrozen entries of a [`ParamStore`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.first.contains_key(name)
    }

    /// One Adam update. Every unfrozen entry must carry a gradient; frozen
    /// entries are not read or written. Gradients are cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, p) in store.iter() {
            if !p.frozen && p.tensor.grad().is_none() {
                return Err(Error::Optimizer(format!("missing gradient for {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let correct1 = 1.0 - self.beta1.powi(t);
        let correct2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let n = grad.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let values = p.tensor.values_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.tensor.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(values), false).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_null_step() {
        let mut s = store_with(vec![0.3, -1.2]);
        s.zero_grads();
        let mut adam = AdamState::new(0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut s).unwrap();
        assert_eq!(s.get("w").unwrap().values(), &[0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with(vec![1.0]);
        s.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
        let mut adam = AdamState::new(0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut s).unwrap();
        let moved = 1.0 - s.get("w").unwrap().values()[0];
        assert!((moved - 0.1).abs() < 1e-8, "{moved}");
        assert!(s.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn three_steps_match_unrolled_recurrence() {
        let grads = [0.5, -1.5, 2.0];
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let mut s = store_with(vec![0.7]);
        let mut adam = AdamState::new(lr, b1, b2, eps);
        for g in grads {
            s.get_mut("w").unwrap().accumulate_grad(&[g]).unwrap();
            adam.step(&mut s).unwrap();
        }
        // Hand-unrolled recurrence.
        let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            theta -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!((s.get("w").unwrap().values()[0] - theta).abs() < 1e-12);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store_with(vec![1.0]);
        let mut adam = AdamState::new(0.1, 0.9, 0.999, 1e-8);
        assert!(matches!(adam.step(&mut s), Err(Error::Optimizer(_))));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn frozen_entries_get_no_moments() {
        let mut s = store_with(vec![1.0]);
        s.insert("g", Tensor::vector(vec![2.0]), true).unwrap();
        s.zero_grads();
        let mut adam = AdamState::new(0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut s).unwrap();
        assert!(adam.has_moments("w"));
        assert!(!adam.has_moments("g"));
        assert_eq!(s.get("g").unwrap().values()[0].to_bits(), 2.0f64.to_bits());
    }
}

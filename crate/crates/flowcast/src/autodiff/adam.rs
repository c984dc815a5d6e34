//! Bias-corrected Adam update over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::{DiffError, ParamStore};

/// Optimizer state: one first/second-moment buffer per parameter slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps_hat: f64) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps_hat,
            m,
            v,
        }
    }

    /// One optimizer step over every parameter, reading the grad slots.
    ///
    /// Update per entry, with `t` the incremented step count:
    /// `m ← β₁m + (1-β₁)g`, `v ← β₂v + (1-β₂)g²`,
    /// `w ← w − lr·m̂ / sqrt(v̂ + ε̂)` where `m̂ = m/(1-β₁ᵗ)`, `v̂ = v/(1-β₂ᵗ)`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), DiffError> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..store.len() {
            let tensor = store.at_mut(i);
            let numel = tensor.numel();
            let grad = tensor
                .grad
                .clone()
                .unwrap_or_else(|| vec![0.0; numel]);
            if grad.len() != numel {
                let (name, t) = store.at(i);
                return Err(DiffError::GradShape {
                    name: name.to_string(),
                    param: t.shape().to_vec(),
                    grad: vec![grad.len()],
                });
            }
            let tensor = store.at_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (e, g) in grad.iter().enumerate() {
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * g;
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * g * g;
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                tensor.data_mut()[e] -= self.lr * m_hat / (v_hat + self.eps_hat).sqrt();
            }
        }
        Ok(())
    }
}

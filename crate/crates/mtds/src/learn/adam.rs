//! Adam over flat parameter vectors, with an optional per-coordinate
//! learning-rate scale (the transition block trains at lr/10).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected descent step on `grad` (the gradient of a loss to
    /// minimize). `lr_scale`, when given, multiplies the learning rate per
    /// coordinate.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        lr: f64,
        lr_scale: Option<&[f64]>,
    ) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam: state has {} coords, params {} / grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(scale) = lr_scale {
            if scale.len() != self.m.len() {
                return Err(Error::Dimension("adam: lr_scale length mismatch".into()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let scale = lr_scale.map_or(1.0, |s| s[i]);
            params[i] -= lr * scale * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

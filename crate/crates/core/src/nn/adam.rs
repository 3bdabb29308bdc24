use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            config,
        }
    }

    /// In-place descent step: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut ParamVector, grads: &[f64]) -> Result<()> {
        check_len("adam gradient", params.len(), grads.len())?;
        check_len("adam moments", params.len(), self.first_moment.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(format!("adam gradient[{i}]")));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    params: &ParamVector,
    grads: &[f64],
    state: &AdamState,
) -> Result<(ParamVector, AdamState)> {
    let mut params = params.clone();
    let mut state = state.clone();
    state.step(&mut params, grads)?;
    Ok((params, state))
}

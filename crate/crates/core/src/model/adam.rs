use serde::{Deserialize, Serialize};

use super::{Grads, Model, ModelError};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !unit(self.beta1) || !unit(self.beta2) {
            return Err(ModelError::Config("adam needs lr >= 0 and betas in (0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(ModelError::Config("adam needs eps > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments, one pair per model slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, model: &Model) -> Result<AdamState, ModelError> {
        config.validate()?;
        let zeros = Grads::zeros_like(model).per_slot;
        Ok(AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }
}

/// Applies one Adam update to every slot's live weights.
pub fn adam_step(state: &mut AdamState, model: &mut Model, grads: &Grads) -> Result<(), ModelError> {
    if grads.per_slot.len() != state.first.len() {
        return Err(ModelError::State("gradient count does not match optimizer state".into()));
    }
    for (i, g) in grads.per_slot.iter().enumerate() {
        if !g.is_finite() {
            return Err(ModelError::Divergence(format!(
                "non-finite gradient for `{}` at step {}",
                model.slots()[i].name,
                state.step + 1
            )));
        }
        if !g.same_shape(&state.first[i]) {
            return Err(ModelError::State(format!("gradient shape mismatch for `{}`", model.slots()[i].name)));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, g) in grads.per_slot.iter().enumerate() {
        let m = state.first[i].as_mut_slice();
        let v = state.second[i].as_mut_slice();
        let x = model.slot_value_mut(i).as_mut_slice();
        for (j, &gj) in g.as_slice().iter().enumerate() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            x[j] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * x[j]);
        }
    }
    Ok(())
}

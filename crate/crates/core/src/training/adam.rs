use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::vit_model::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!(
                    "{name} = {b} must lie in [0, 1)"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(TrainError::Config(format!(
                "eps = {} must be positive",
                self.eps
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Number of steps taken.
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite or the gradient table does not line up with `params`.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::GradientShape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((pn, p), (gn, g)) in params.iter().zip(grads.iter()) {
        if pn != gn || p.shape() != g.shape() {
            return Err(TrainError::GradientShape(format!(
                "`{pn}` {:?} paired with `{gn}` {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                tensor: gn.to_string(),
            });
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((_, p), (_, g)), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g as f64;
            let m_new = beta1 * *m as f64 + (1.0 - beta1) * g;
            let v_new = beta2 * *v as f64 + (1.0 - beta2) * g * g;
            *m = m_new as f32;
            *v = v_new as f32;
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

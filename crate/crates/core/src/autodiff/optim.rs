use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Learning rate used for models trained from scratch.
    pub const DESK_LR: f64 = 1e-3;
    /// Learning rate reported for fine-tuning a pretrained backbone.
    pub const PRETRAINED_FINETUNE_LR: f64 = 2e-5;

    /// Same betas and epsilon as [`Default`], with the fine-tuning learning
    /// rate.
    pub fn pretrained_finetune() -> Self {
        Self {
            lr: Self::PRETRAINED_FINETUNE_LR,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: Self::DESK_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        Self { step: 0, m, v }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            config,
            state: AdamState::for_params(params),
        }
    }

    /// One bias-corrected Adam update. Rejects the whole step, leaving
    /// parameters and state untouched, if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        adam_step(params, grads, &mut self.state, &self.config)
    }
}

pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::contract(format!("adam: lr must be positive, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::contract("adam: params, grads and state disagree in count"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() || p.len() != state.v[i].len() {
            return Err(Error::contract(format!("adam: shape mismatch for tensor {i}")));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "adam: gradient of tensor {i} has non-finite entry {} at {j}",
                g[j]
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gj), mj), vj) in p.values_mut().iter_mut().zip(g.iter()).zip(m).zip(v) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

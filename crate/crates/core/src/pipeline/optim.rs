use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

use super::TrainConfig;

/// `lr0 * decay_rate^(step / decay_steps)` with a continuous exponent.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    cfg.lr0 * cfg.decay_rate.powf(step as f64 / cfg.decay_steps as f64)
}

/// Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every parameter that requires a
/// gradient and has one. Parameters without a gradient keep their moments.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.numel() != state.m[i].len() {
            return Err(Error::State(format!(
                "parameter {i} has {} entries, optimizer state {}",
                p.numel(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = (1.0 - b1.powi(t)) as f32;
    let c2 = (1.0 - b2.powi(t)) as f32;
    let (b1, b2, eps, lr) = (b1 as f32, b2 as f32, state.eps as f32, lr as f32);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let (data, Some(grad)) = p.data_and_grad() else {
            continue;
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

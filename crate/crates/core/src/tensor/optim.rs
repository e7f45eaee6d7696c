use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(id.0)
            .and_then(Option::as_ref)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) {
        if self.moments.len() <= id.0 {
            self.moments.resize_with(id.0 + 1, || None);
        }
        self.moments[id.0] = Some((m, v));
    }

    /// Parameters that own moment buffers, in store order.
    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_some())
            .map(|(i, _)| ParamId(i))
    }
}

/// One decoupled-weight-decay Adam update over `params`, reading each
/// parameter's accumulated gradient.
pub fn adamw_step(store: &mut ParamStore, params: &[ParamId], state: &mut OptimizerState) -> Result<()> {
    for &id in params {
        if store.get(id).grad().is_none() {
            return Err(Error::Contract(format!("parameter {} has no gradient", store.name(id))));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    if state.moments.len() < store.len() {
        state.moments.resize_with(store.len(), || None);
    }
    for &id in params {
        let tensor = store.get_mut(id);
        let n = tensor.len();
        let (m, v) = state.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::Contract(format!("moment buffer size mismatch for parameter {}", id.0)));
        }
        let grad = tensor.grad.take().expect("checked above");
        let data = tensor.data_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= cfg.lr * cfg.weight_decay * data[i];
            data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        tensor.grad = Some(grad);
    }
    Ok(())
}

/// Linear warmup to `base_lr` followed by cosine decay to zero.
pub fn cosine_warmup_lr(step: u64, total_steps: u64, base_lr: f64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as u64;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return base_lr;
    }
    let progress = (step.min(total_steps) - warmup) as f64 / (total_steps - warmup) as f64;
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}

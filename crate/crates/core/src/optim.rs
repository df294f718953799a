//! Bias-corrected Adam over any [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one per tensor, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &dyn ParamSet, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, m)| m.as_slice().len()).collect();
        AdamState {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One Adam update at step `t = state.t + 1`. Fails without touching
/// anything if any gradient is non-finite.
pub fn adam_step(params: &mut dyn ParamSet, grads: &dyn ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    let g = grads.tensors();
    if g.len() != state.m.len() {
        return Err(validation("gradient set does not match optimizer state"));
    }
    for (name, m) in &g {
        if !m.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient in {name}")));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let mut p = params.tensors_mut();
    if p.len() != g.len() {
        return Err(validation("parameter set does not match gradient set"));
    }
    for (i, ((_, param), (_, grad))) in p.iter_mut().zip(&g).enumerate() {
        let gs = grad.as_slice();
        let ps = param.as_mut_slice();
        if ps.len() != gs.len() || state.m[i].len() != gs.len() {
            return Err(validation("tensor size mismatch in adam_step"));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..gs.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * gs[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * gs[j] * gs[j];
            if lr != 0.0 {
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                ps[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
    Ok(())
}

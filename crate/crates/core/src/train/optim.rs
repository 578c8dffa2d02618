//! Adam with bias correction and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{NamedTensor, OptimizerState, Param};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// First and second moment estimates, one vector per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
        }
    }

    pub fn to_checkpoint(&self, params: &[Param<T>]) -> OptimizerState {
        let mut tensors = Vec::with_capacity(2 * params.len());
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            tensors.push(NamedTensor::from_slice(format!("{}.adam_m", p.name), &p.shape, m));
            tensors.push(NamedTensor::from_slice(format!("{}.adam_v", p.name), &p.shape, v));
        }
        OptimizerState { step: self.step, tensors }
    }

    pub fn from_checkpoint(state: &OptimizerState, params: &[Param<T>]) -> Result<Self> {
        let get = |name: String, n: usize| -> Result<Vec<T>> {
            let t = state
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("optimizer state has no tensor {name}")))?;
            if t.numel() != n {
                return Err(Error::Format(format!("optimizer tensor {name} has {} values, expected {n}", t.numel())));
            }
            Ok(t.to_vec())
        };
        let mut s = AdamState::new(params);
        s.step = state.step;
        for (i, p) in params.iter().enumerate() {
            s.m[i] = get(format!("{}.adam_m", p.name), p.data.len())?;
            s.v[i] = get(format!("{}.adam_v", p.name), p.data.len())?;
        }
        Ok(s)
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter is touched.
pub fn adam_step<T: Real>(
    params: &mut [Param<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.data.len() {
            return Err(Error::shape("adam_step", &[p.data.len()], &[g.len()]));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} in parameter {} at element {i}",
                g[i], p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..g.len() {
            let gi = g[i].f64();
            let mi = cfg.beta1 * m[i].f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i].f64() + (1.0 - cfg.beta2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            p.data[i] = T::of(p.data[i].f64() - update);
        }
    }
    Ok(())
}

/// `base·½·(1 + cos(π·step/total))`, no warmup.
pub fn cosine_lr(step: u64, total: u64, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

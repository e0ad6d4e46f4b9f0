use serde::{Deserialize, Serialize};

use crate::diffcore::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Moments and step count of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Slot {
    pub fn fresh(name: &str, len: usize) -> Self {
        Slot {
            name: name.to_string(),
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Optimizer state, one slot per parameter tensor in canonical order. Step
/// counts are per tensor so that tensors created mid-run get their own bias
/// correction.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub slots: Vec<Slot>,
}

impl OptimizerState {
    pub fn new<S: Scalar>(config: AdamWConfig, named: &[(String, &Tensor<S>)]) -> Self {
        OptimizerState {
            config,
            slots: named.iter().map(|(n, t)| Slot::fresh(n, t.len())).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction:
/// `p ← p − lr·(m̂/(√v̂+ε) + wd·p)`. Weight decay applies to tensors of rank
/// two or more. Gradients are checked before anything is touched.
pub fn adamw_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Vec<S>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.slots.len()
        )));
    }
    for ((p, g), slot) in params.iter().zip(grads).zip(&state.slots) {
        if g.len() != p.len() || slot.m.len() != p.len() {
            return Err(Error::shape("adamw_step", p.shape(), &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}`", slot.name)));
        }
    }
    let c = state.config;
    for ((p, g), slot) in params.iter_mut().zip(grads).zip(state.slots.iter_mut()) {
        slot.t += 1;
        let bc1 = 1.0 - c.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - c.beta2.powi(slot.t as i32);
        let wd = if p.shape().len() >= 2 { c.weight_decay } else { 0.0 };
        for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut slot.m).zip(&mut slot.v) {
            let gi = gi.as_f64();
            let mi = c.beta1 * *m + (1.0 - c.beta1) * gi;
            let vi = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
            *m = mi;
            *v = vi;
            let wi = w.as_f64();
            let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps) + wd * wi;
            *w = S::from_f64_lossy(wi - lr * update);
        }
    }
    Ok(())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = S::from_f64_lossy(max_norm / norm);
        grads.iter_mut().flatten().for_each(|v| *v = *v * s);
    }
    norm
}

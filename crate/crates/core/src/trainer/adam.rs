//! Adam over a flat list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having zero gradient.
pub fn adam_step(params: &mut [Tensor], grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "optimizer holds {} slots for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (id, p) in params.iter().enumerate() {
        if let Some(g) = grads.get(id) {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (id, p) in params.iter_mut().enumerate() {
        let g = grads.get(id).map(Tensor::data);
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            *w -= state.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

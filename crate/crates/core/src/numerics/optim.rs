use serde::{Deserialize, Serialize};

use super::params::{Grad, ParamGrads, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    // parameters whose moments are still all zero can be skipped
    live: Vec<bool>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            live: vec![false; sizes.len()],
        }
    }

    pub(crate) fn from_parts(step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        let live = m.iter().map(|b| b.iter().any(|x| *x != 0.0)).collect();
        AdamState { step, m, v, live }
    }
}

/// One Adam update with bias correction. Parameters without a gradient
/// entry are treated as having a zero gradient.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be non-negative, got {}", cfg.lr)));
    }
    if state.m.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match parameter layout"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let grad = grads.get(id);
        if grad.is_none() && !state.live[i] {
            continue;
        }
        state.live[i] = true;
        let len = store.get(id).len();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let value = store.get_mut(id).data_mut();
        let mut update = |k: usize, g: f64| {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            value[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        };
        match grad {
            Some(Grad::Dense(g)) => g.iter().enumerate().for_each(|(k, &gv)| update(k, gv)),
            Some(Grad::Sparse { cols, rows }) => {
                let n_rows = len / cols;
                let mut it = rows.iter().peekable();
                for r in 0..n_rows {
                    match it.peek() {
                        Some((&gr, g)) if gr == r => {
                            for c in 0..*cols {
                                update(r * cols + c, g[c]);
                            }
                            it.next();
                        }
                        _ => (0..*cols).for_each(|c| update(r * cols + c, 0.0)),
                    }
                }
            }
            None => (0..len).for_each(|k| update(k, 0.0)),
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.global_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale(scale);
        }
    }
    norm
}

//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One optimized tensor, flattened. Weight decay applies only when `decay`.
pub struct ParamSlot<'a> {
    pub values: &'a mut [f64],
    pub decay: bool,
}

/// Moments mirror the slot layout they were created for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (first, second) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }
}

/// One AdamW update:
/// `p ← p − η·λ·p`, then `p ← p − η·m̂ / (√v̂ + ε)`.
///
/// # Panics
/// Panics when the slot, gradient and moment layouts disagree.
pub fn adamw_step(params: &mut [ParamSlot<'_>], grads: &[&[f64]], state: &mut OptimizerState) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient slot count");
    assert_eq!(params.len(), state.first.len(), "parameter/moment slot count");
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let correction1 = 1.0 - c.beta1.powi(t);
    let correction2 = 1.0 - c.beta2.powi(t);
    for (slot, ((g, m), v)) in params
        .iter_mut()
        .zip(grads.iter().zip(state.first.iter_mut()).zip(state.second.iter_mut()))
    {
        assert_eq!(slot.values.len(), g.len(), "parameter/gradient shape");
        assert_eq!(slot.values.len(), m.len(), "parameter/moment shape");
        let decay = if slot.decay {
            c.learning_rate * c.weight_decay
        } else {
            0.0
        };
        for i in 0..g.len() {
            let p = &mut slot.values[i];
            *p -= decay * *p;
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

//! Adam optimizer over a parameter store.

use super::tensor::ParamStore;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update for every parameter in the store.
/// Gradient buffers are read but never modified or cleared; callers decide
/// when to call [`zero_grads`], which is what makes gradient accumulation
/// across multiple backward passes work.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, cfg: &AdamConfig) {
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one_m_b1 = S::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = S::from_f64(1.0 - cfg.beta2);
    let eps = S::from_f64(cfg.eps);
    for (_, p) in params.iter_mut() {
        p.steps += 1;
        // Correction factors stay in f64: beta^t underflows f32 harmlessly
        // late in training but the division is more accurate this way.
        let c1 = S::from_f64(cfg.lr / (1.0 - cfg.beta1.powi(p.steps as i32)));
        let c2 = S::from_f64(1.0 / (1.0 - cfg.beta2.powi(p.steps as i32)));
        let n = p.tensor.values.len();
        let zero = S::zero();
        for i in 0..n {
            let g = match &p.tensor.grad {
                Some(gr) => gr[i],
                None => zero,
            };
            let m = b1 * p.m[i] + one_m_b1 * g;
            let v = b2 * p.v[i] + one_m_b2 * g * g;
            p.m[i] = m;
            p.v[i] = v;
            let denom = (v * c2).sqrt() + eps;
            p.tensor.values[i] -= c1 * m / denom;
        }
    }
}

pub fn zero_grads<S: Scalar>(params: &mut ParamStore<S>) {
    for (_, p) in params.iter_mut() {
        p.tensor.zero_grad();
    }
}

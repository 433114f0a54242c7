//! Adam with L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// coupled decay: g <- g + weight_decay * theta before the moment update
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("adam: lr {} must be positive", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(format!("adam: {name} {beta} must be in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("adam: eps {} must be positive", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "adam: weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamSlot<S: Scalar> {
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> AdamSlot<S> {
    pub fn new(len: usize) -> Self {
        AdamSlot { m: vec![S::zero(); len], v: vec![S::zero(); len] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One Adam update for one parameter tensor. `t` is the 1-based step count
/// used for bias correction and must be shared across all parameters of a
/// training run. Non-finite gradients abort with the parameter's name.
pub fn adam_step<S: Scalar>(
    cfg: &AdamConfig,
    t: usize,
    name: &str,
    theta: &mut [S],
    grad: &[S],
    slot: &mut AdamSlot<S>,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adam_step: step count is 1-based"));
    }
    if grad.len() != theta.len() || slot.m.len() != theta.len() {
        return Err(Error::shape(format!(
            "adam_step '{name}': theta {} / grad {} / state {} lengths differ",
            theta.len(),
            grad.len(),
            slot.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric(format!(
            "adam_step: non-finite gradient in parameter '{name}'"
        )));
    }
    let lr = S::from_f64(cfg.lr);
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let eps = S::from_f64(cfg.eps);
    let wd = S::from_f64(cfg.weight_decay);
    let one = S::one();
    let bc1 = S::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = S::from_f64(1.0 - cfg.beta2.powi(t as i32));
    for i in 0..theta.len() {
        let g = grad[i] + wd * theta[i];
        slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
        slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

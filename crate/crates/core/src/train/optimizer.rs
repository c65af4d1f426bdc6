//! First-order optimizers on flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptimizerKind {
    Adabelief,
    Adam,
    Sgd,
}

/// Optimizer hyperparameters. `beta1`, `beta2` and `eps` are ignored by SGD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adabelief() -> Self {
        Self { kind: OptimizerKind::Adabelief, beta1: 0.9, beta2: 0.999, eps: 1e-16 }
    }

    pub fn adam() -> Self {
        Self { kind: OptimizerKind::Adam, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd() -> Self {
        Self { kind: OptimizerKind::Sgd, beta1: 0.0, beta2: 0.0, eps: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == OptimizerKind::Sgd {
            return Ok(());
        }
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("optimizer needs beta1, beta2 in [0, 1) and a finite eps >= 0"));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adabelief()
    }
}

/// Moment estimates and step count. `s` holds the belief (AdaBelief) or
/// second moment (Adam); both are empty for SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub t: u64,
    pub m: Vec<T>,
    pub s: Vec<T>,
    /// Steps rejected for non-finite gradients.
    pub skipped: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let n = if kind == OptimizerKind::Sgd { 0 } else { n };
        Self { t: 0, m: vec![T::zero(); n], s: vec![T::zero(); n], skipped: 0 }
    }
}

/// One update of `params` in place. Returns `false` and leaves everything
/// but the skip counter untouched when a gradient entry is not finite.
pub fn optimizer_step<T: Scalar>(state: &mut OptimizerState<T>, params: &mut [T], grads: &[T], hyper: &OptimizerConfig, lr: f64) -> Result<bool> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        state.skipped += 1;
        log::warn!("skipping optimizer step {}: gradient entry {i} is not finite", state.t + 1);
        return Ok(false);
    }
    let lr = T::lit(lr);
    if hyper.kind == OptimizerKind::Sgd {
        state.t += 1;
        for (p, &g) in params.iter_mut().zip(grads) {
            *p = *p - lr * g;
        }
        return Ok(true);
    }
    if state.m.len() != params.len() || state.s.len() != params.len() {
        return Err(Error::shape("optimizer state does not match the parameter count"));
    }
    state.t += 1;
    let (b1, b2, eps) = (T::lit(hyper.beta1), T::lit(hyper.beta2), T::lit(hyper.eps));
    let one = T::one();
    let c1 = one - b1.powi(state.t as i32);
    let c2 = one - b2.powi(state.t as i32);
    let belief = hyper.kind == OptimizerKind::Adabelief;
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.m[i] + (one - b1) * g;
        let s = if belief {
            let r = g - m;
            b2 * state.s[i] + (one - b2) * r * r + eps
        } else {
            b2 * state.s[i] + (one - b2) * g * g
        };
        state.m[i] = m;
        state.s[i] = s;
        params[i] = params[i] - lr * (m / c1) / ((s / c2).sqrt() + eps);
    }
    Ok(true)
}

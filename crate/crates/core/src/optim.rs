//! Adam with extrapolation from the past, and the Lagrangian wrapper that
//! drives a single inequality constraint with a nonnegative multiplier.
//!
//! Every iteration has two phases. The extrapolation phase moves the
//! parameters along the previous iteration's Adam direction (no new gradient
//! is needed). The gradient is then evaluated at the extrapolated point and
//! applied, with fresh bias-corrected moments, to the parameters as they were
//! before extrapolating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExtraAdam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    /// Parameters as they were before the pending extrapolation.
    anchor: Option<Vec<f64>>,
}

impl ExtraAdam {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            anchor: None,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    fn direction(&self, i: usize) -> f64 {
        if self.t == 0 {
            return 0.0;
        }
        let c = &self.config;
        let t = self.t as i32;
        let m_hat = self.m[i] / (1.0 - c.beta1.powi(t));
        let v_hat = self.v[i] / (1.0 - c.beta2.powi(t));
        m_hat / (v_hat.sqrt() + c.eps)
    }

    /// Lookahead along the previous update direction. A no-op before the
    /// first step.
    pub fn extrapolate(&mut self, params: &mut [f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        self.anchor = Some(params.to_vec());
        for (i, p) in params.iter_mut().enumerate() {
            *p -= self.config.lr * self.direction(i);
        }
    }

    /// Applies `grad` from the pre-extrapolation parameters.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grad.len(), self.m.len(), "gradient count");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedNaN { step: self.t });
        }
        if let Some(anchor) = self.anchor.take() {
            params.copy_from_slice(&anchor);
        }
        self.t += 1;
        let c = self.config;
        for (i, &g) in grad.iter().enumerate() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
        }
        for (i, p) in params.iter_mut().enumerate() {
            *p -= c.lr * self.direction(i);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::DivergedNaN { step: self.t });
        }
        Ok(())
    }
}

/// One full extrapolate-evaluate-update iteration. Returns the gradient that
/// was evaluated at the extrapolated point.
pub fn extra_adam_step<F>(state: &mut ExtraAdam, params: &mut [f64], mut grad_fn: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    state.extrapolate(params);
    let grad = grad_fn(params)?;
    state.step(params, &grad)?;
    Ok(grad)
}

/// Multiplier state for `E||r||_1 <= beta`.
#[derive(Debug, Clone)]
pub struct LagrangianState {
    pub lambda: f64,
    pub beta: f64,
    optimizer: ExtraAdam,
    anchor_lambda: Option<f64>,
}

impl LagrangianState {
    pub fn new(beta: f64, dual_lr: f64) -> Self {
        Self {
            lambda: 0.0,
            beta,
            optimizer: ExtraAdam::new(1, AdamConfig::with_lr(dual_lr)),
            anchor_lambda: None,
        }
    }

    pub fn dual_lr(&self) -> f64 {
        self.optimizer.config.lr
    }

    /// `loss + lambda * (constraint - beta)`.
    pub fn lagrangian(&self, loss: f64, constraint_value: f64) -> f64 {
        lagrangian(loss, constraint_value, self.lambda, self.beta)
    }

    /// Extrapolation phase of the dual update, projected onto `lambda >= 0`.
    pub fn extrapolate(&mut self) {
        self.anchor_lambda = Some(self.lambda);
        let mut x = [self.lambda];
        self.optimizer.extrapolate(&mut x);
        self.lambda = x[0].max(0.0);
    }

    /// Gradient ascent on the multiplier with gradient `constraint - beta`,
    /// then projection onto `lambda >= 0`.
    pub fn dual_step(&mut self, constraint_value: f64) -> Result<()> {
        if let Some(a) = self.anchor_lambda.take() {
            self.lambda = a;
        }
        let mut x = [self.lambda];
        // The optimizer minimizes, so ascend by descending the negation.
        self.optimizer.step(&mut x, &[self.beta - constraint_value])?;
        self.lambda = x[0].max(0.0);
        Ok(())
    }
}

pub fn lagrangian(loss: f64, constraint_value: f64, lambda: f64, beta: f64) -> f64 {
    loss + lambda * (constraint_value - beta)
}

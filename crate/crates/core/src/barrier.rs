//! Log barrier penalties and the gap bound of the smoothed barrier method.
//!
//! Three penalties are provided:
//!
//! - the plain log barrier `-(1/mu) ln(-x)`, defined only for `x < 0`;
//! - the linear smoothed log barrier, which follows the log barrier up to the
//!   knot `x = -1/mu^2` and continues linearly with slope `mu` afterwards, so
//!   it is finite and continuously differentiable on the whole real line;
//! - the shifted barrier applied to a safety critic value `q`: the smoothed
//!   barrier evaluated at `max(q - d, 0) - 1`. It is exactly zero, with zero
//!   slope, whenever `q <= d`.
//!
//! All functions are pure.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("log barrier undefined at x = {0} (requires x < 0)")]
    OutsideDomain(f64),
    #[error("barrier factor mu = {0} must be positive")]
    NonPositiveFactor(f64),
    #[error("shifted barrier requires mu > 1, got {0}")]
    FactorNotAboveOne(f64),
    #[error("shifted barrier requires mu >= 1, got {0}")]
    FactorBelowOne(f64),
    #[error("cost limit must be finite, got {0}")]
    NonFiniteLimit(f64),
    #[error("number of constraints must be at least 1")]
    NoConstraints,
}

/// Barrier factor and cost limit of the shifted barrier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierConfig {
    mu: f64,
    cost_limit: f64,
}

impl BarrierConfig {
    /// Requires `mu > 1` and a finite cost limit.
    pub fn new(mu: f64, cost_limit: f64) -> Result<Self, BarrierError> {
        if !(mu > 1.0) {
            return Err(BarrierError::FactorNotAboveOne(mu));
        }
        Self::relaxed(mu, cost_limit)
    }

    /// Like [`BarrierConfig::new`] but admits `mu = 1`, where the logarithmic
    /// middle branch of the shifted barrier is empty and the penalty is the
    /// slope-saturated ramp `max(x - d, 0)`. Only the bound bench uses this.
    pub fn relaxed(mu: f64, cost_limit: f64) -> Result<Self, BarrierError> {
        if !(mu >= 1.0) || !mu.is_finite() {
            return Err(BarrierError::FactorBelowOne(mu));
        }
        if !cost_limit.is_finite() {
            return Err(BarrierError::NonFiniteLimit(cost_limit));
        }
        Ok(Self { mu, cost_limit })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn cost_limit(&self) -> f64 {
        self.cost_limit
    }

    /// Shifted barrier value at `x`.
    pub fn value(&self, x: f64) -> f64 {
        smoothed_log_barrier((x - self.cost_limit).max(0.0) - 1.0, self.mu)
    }

    /// Derivative of [`BarrierConfig::value`]; zero on the whole dead zone
    /// `x <= d`, including the corner.
    pub fn grad(&self, x: f64) -> f64 {
        let z = x - self.cost_limit;
        if z <= 0.0 {
            return 0.0;
        }
        if z <= 1.0 - 1.0 / (self.mu * self.mu) {
            1.0 / (self.mu * (1.0 - z))
        } else {
            self.mu
        }
    }
}

/// `-(1/mu) ln(-x)` for `x < 0`.
pub fn log_barrier(x: f64, mu: f64) -> Result<f64, BarrierError> {
    if !(mu > 0.0) {
        return Err(BarrierError::NonPositiveFactor(mu));
    }
    if !(x < 0.0) {
        return Err(BarrierError::OutsideDomain(x));
    }
    Ok(-(-x).ln() / mu)
}

/// Position of the knot between the logarithmic and linear branches.
#[inline]
pub fn knot(mu: f64) -> f64 {
    -1.0 / (mu * mu)
}

/// Linear smoothed log barrier. Total on the reals for `mu > 0`.
pub fn smoothed_log_barrier(x: f64, mu: f64) -> f64 {
    if x <= knot(mu) {
        -(-x).ln() / mu
    } else {
        mu * x - (1.0 / (mu * mu)).ln() / mu + 1.0 / mu
    }
}

pub fn smoothed_log_barrier_grad(x: f64, mu: f64) -> f64 {
    if x <= knot(mu) {
        -1.0 / (mu * x)
    } else {
        mu
    }
}

pub fn shifted_barrier(x: f64, cfg: &BarrierConfig) -> f64 {
    cfg.value(x)
}

pub fn shifted_barrier_grad(x: f64, cfg: &BarrierConfig) -> f64 {
    cfg.grad(x)
}

/// Upper bound `|1 - mu^2| m / mu` on the objective gap between the
/// barrier-penalised optimum and the constrained optimum with `m` constraints.
pub fn performance_bound(mu: f64, m: usize) -> Result<f64, BarrierError> {
    if !(mu > 0.0) {
        return Err(BarrierError::NonPositiveFactor(mu));
    }
    if m == 0 {
        return Err(BarrierError::NoConstraints);
    }
    Ok((1.0 - mu * mu).abs() * m as f64 / mu)
}

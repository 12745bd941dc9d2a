//! Utility, production and drift primitives.

use thiserror::Error;

use crate::{Calibration, Regime};

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("consumption must be positive, got {0}")]
    NonPositiveConsumption(f64),
    #[error("marginal value must be positive, got {0}")]
    NonPositiveMarginalValue(f64),
    #[error("capital must be nonnegative, got {0}")]
    NegativeCapital(f64),
    #[error("regime {0:?} has no deterministic steady state")]
    NoSteadyState(Regime),
}

/// CRRA utility `c^(1-gamma) / (1-gamma)`.
pub fn utility(c: f64, gamma: f64) -> Result<f64, DomainError> {
    if c.is_nan() || c <= 0.0 {
        return Err(DomainError::NonPositiveConsumption(c));
    }
    Ok(c.powf(1.0 - gamma) / (1.0 - gamma))
}

pub fn marginal_utility(c: f64, gamma: f64) -> f64 {
    c.powf(-gamma)
}

/// Consumption implied by the first-order condition `u'(c) = v'`.
pub fn marginal_utility_inverse(vprime: f64, gamma: f64) -> Result<f64, DomainError> {
    if vprime.is_nan() || vprime <= 0.0 {
        return Err(DomainError::NonPositiveMarginalValue(vprime));
    }
    Ok(vprime.powf(-1.0 / gamma))
}

pub fn tfp(regime: Regime, cal: &Calibration) -> f64 {
    match regime {
        Regime::L | Regime::W => cal.a_l,
        Regime::H => cal.a_h,
    }
}

pub fn production(k: f64, regime: Regime, cal: &Calibration) -> Result<f64, DomainError> {
    if k.is_nan() || k < 0.0 {
        return Err(DomainError::NegativeCapital(k));
    }
    Ok(tfp(regime, cal) * k.powf(cal.alpha))
}

pub fn marginal_product(k: f64, regime: Regime, cal: &Calibration) -> f64 {
    cal.alpha * tfp(regime, cal) * k.powf(cal.alpha - 1.0)
}

pub fn drift(k: f64, c: f64, regime: Regime, cal: &Calibration) -> Result<f64, DomainError> {
    if c.is_nan() || c < 0.0 {
        return Err(DomainError::NonPositiveConsumption(c));
    }
    Ok(production(k, regime, cal)? - c - cal.delta * k)
}

/// Consumption that keeps capital constant.
pub fn zero_drift_consumption(k: f64, regime: Regime, cal: &Calibration) -> f64 {
    tfp(regime, cal) * k.powf(cal.alpha) - cal.delta * k
}

/// Noise-free, switching-free steady state `(alpha A_j / (rho + delta))^(1/(1-alpha))`.
pub fn deterministic_steady_state(regime: Regime, cal: &Calibration) -> Result<f64, DomainError> {
    if regime == Regime::W {
        return Err(DomainError::NoSteadyState(regime));
    }
    let base = cal.alpha * tfp(regime, cal) / (cal.rho + cal.delta);
    Ok(base.powf(1.0 / (1.0 - cal.alpha)))
}

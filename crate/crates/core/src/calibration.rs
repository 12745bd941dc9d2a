//! Structural and computational parameters in one validated record.
//!
//! JSON keys match the field names (`gamma`, `A_L`, `lambda_LH`, `N`, ...).
//! Missing keys take baseline values; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
}

/// How the W-regime implicit step treats the signaling option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WStep {
    /// Discrete complementarity problem solved inside the implicit step.
    #[default]
    Complementarity,
    /// Linear solve with the previous step's policy, then projection.
    Project,
}

/// Geometric ramp of the implicit step: dt_n = min(start * factor^(n-1), dt).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtRamp {
    pub start: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibration {
    /// Relative risk aversion.
    pub gamma: f64,
    /// Discount rate (1/year).
    pub rho: f64,
    /// Capital elasticity.
    pub alpha: f64,
    /// Depreciation (1/year).
    pub delta: f64,
    #[serde(rename = "A_L")]
    pub a_l: f64,
    #[serde(rename = "A_H")]
    pub a_h: f64,
    /// Additive diffusion (capital/sqrt(year)).
    pub sigma: f64,
    /// Opportunity arrival L -> W (1/year).
    #[serde(rename = "lambda_LH")]
    pub lambda_lh: f64,
    /// Obsolescence W -> L and H -> L (1/year).
    #[serde(rename = "lambda_HL")]
    pub lambda_hl: f64,
    /// Signaling cost (capital units).
    pub phi: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub k_min: f64,
    pub k_max: f64,
    /// Implicit step (years).
    pub dt: f64,
    /// Sup-norm convergence tolerance.
    pub tol: f64,
    /// KFE drain rate out of the signal region (1/year).
    pub lambda_bar: f64,
    pub max_iter: usize,
    pub dt_ramp: Option<DtRamp>,
    pub w_step: WStep,
    /// Row of the 3N KFE system replaced by the normalization; default last.
    pub normalization_row: Option<usize>,
    /// Multiplier in the attractor separation test.
    pub separation_factor: f64,
    /// Peak prominence as a fraction of max density.
    pub peak_prominence: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self::baseline()
    }
}

impl Calibration {
    pub fn baseline() -> Self {
        Self {
            gamma: 2.0,
            rho: 0.05,
            alpha: 0.33,
            delta: 0.02,
            a_l: 1.0,
            a_h: 1.25,
            sigma: 0.30,
            lambda_lh: 0.005,
            lambda_hl: 0.002,
            phi: 9.0,
            n: 501,
            k_min: 0.01,
            k_max: 50.0,
            dt: 500.0,
            tol: 1e-8,
            lambda_bar: 1e3,
            max_iter: 500,
            dt_ramp: None,
            w_step: WStep::Complementarity,
            normalization_row: None,
            separation_factor: 2.0,
            peak_prominence: 0.05,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self, CalibrationError> {
        let cal: Self = serde_json::from_str(s)?;
        cal.validate()?;
        Ok(cal)
    }

    pub fn from_path(path: &Path) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CalibrationError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    /// Set a numeric field by its JSON name (used by sweeps).
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<(), CalibrationError> {
        let mut doc = serde_json::to_value(&*self)?;
        let obj = doc.as_object_mut().expect("calibration serializes to an object");
        match obj.get(name) {
            Some(serde_json::Value::Number(_)) => {}
            _ => {
                return Err(CalibrationError::Invalid {
                    field: "param",
                    reason: format!("`{name}` is not a numeric calibration field"),
                })
            }
        }
        let v = if name == "N" || name == "max_iter" {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(CalibrationError::Invalid {
                    field: "param",
                    reason: format!("`{name}` needs a nonnegative integer, got {value}"),
                });
            }
            serde_json::Value::from(value as u64)
        } else {
            serde_json::Value::from(value)
        };
        obj.insert(name.to_string(), v);
        *self = serde_json::from_value(doc)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        fn bad(field: &'static str, reason: impl Into<String>) -> CalibrationError {
            CalibrationError::Invalid { field, reason: reason.into() }
        }
        let finite = [
            ("gamma", self.gamma),
            ("rho", self.rho),
            ("alpha", self.alpha),
            ("delta", self.delta),
            ("A_L", self.a_l),
            ("A_H", self.a_h),
            ("sigma", self.sigma),
            ("lambda_LH", self.lambda_lh),
            ("lambda_HL", self.lambda_hl),
            ("phi", self.phi),
            ("k_min", self.k_min),
            ("k_max", self.k_max),
            ("dt", self.dt),
            ("tol", self.tol),
            ("lambda_bar", self.lambda_bar),
            ("separation_factor", self.separation_factor),
            ("peak_prominence", self.peak_prominence),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(bad(name, format!("must be finite, got {v}")));
            }
        }
        if self.gamma <= 0.0 || self.gamma == 1.0 {
            return Err(bad("gamma", "must be positive and different from 1"));
        }
        if self.rho <= 0.0 {
            return Err(bad("rho", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(bad("alpha", "must lie in (0, 1)"));
        }
        if self.delta <= 0.0 {
            return Err(bad("delta", "must be positive"));
        }
        if self.a_l <= 0.0 {
            return Err(bad("A_L", "must be positive"));
        }
        if self.a_h <= self.a_l {
            return Err(bad(
                "A_H",
                format!("A_H = {} must exceed A_L = {}: signaling leads to higher TFP", self.a_h, self.a_l),
            ));
        }
        if self.sigma < 0.0 {
            return Err(bad("sigma", "must be nonnegative"));
        }
        if self.lambda_lh < 0.0 {
            return Err(bad("lambda_LH", "must be nonnegative"));
        }
        if self.lambda_hl < 0.0 {
            return Err(bad("lambda_HL", "must be nonnegative"));
        }
        if self.phi <= 0.0 {
            return Err(bad("phi", "must be positive"));
        }
        if self.n < 3 {
            return Err(bad("N", "needs at least 3 grid points"));
        }
        if self.k_min <= 0.0 {
            return Err(bad("k_min", "must be positive"));
        }
        if !(self.k_min < self.phi && self.phi < self.k_max) {
            return Err(bad("phi", "requires k_min < phi < k_max"));
        }
        let net = self.a_l * self.k_max.powf(self.alpha) - self.delta * self.k_max;
        if net <= 0.0 {
            return Err(bad("k_max", "exceeds the largest capital stock sustainable with positive consumption"));
        }
        if self.dt <= 0.0 {
            return Err(bad("dt", "must be positive"));
        }
        if self.tol <= 0.0 {
            return Err(bad("tol", "must be positive"));
        }
        if self.lambda_bar <= 0.0 {
            return Err(bad("lambda_bar", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(bad("max_iter", "must be at least 1"));
        }
        if let Some(r) = self.dt_ramp {
            if !(r.start > 0.0 && r.factor >= 1.0 && r.start.is_finite() && r.factor.is_finite()) {
                return Err(bad("dt_ramp", "needs start > 0 and factor >= 1"));
            }
        }
        if let Some(row) = self.normalization_row {
            if row >= 3 * self.n {
                return Err(bad("normalization_row", format!("must be below 3N = {}", 3 * self.n)));
            }
        }
        if self.separation_factor <= 0.0 {
            return Err(bad("separation_factor", "must be positive"));
        }
        if !(self.peak_prominence >= 0.0 && self.peak_prominence < 1.0) {
            return Err(bad("peak_prominence", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Implicit step used at outer iteration `n` (1-based).
    pub fn dt_at(&self, n: usize) -> f64 {
        match self.dt_ramp {
            None => self.dt,
            Some(r) => {
                let e = (n.saturating_sub(1)).min(10_000) as i32;
                (r.start * r.factor.powi(e)).min(self.dt)
            }
        }
    }
}

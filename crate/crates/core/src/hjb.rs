//! Coupled three-regime HJB solver.
//!
//! Each outer iteration performs implicit upwind steps in the order
//! L -> W -> H, always using the most recently updated neighbour values.
//! The W step carries the signaling option: at nodes with `k >= phi` the agent
//! may jump to H at `k - phi`. By default the W step solves the discrete
//! obstacle problem `min(A V - b, V - psi) = 0` by policy iteration on the
//! exercise set, then applies [`american_projection`] as a consistency check.
//! With `w_step = "project"` it instead solves the linear continuation
//! equation and projects afterwards.
//!
//! Inside the signal region the reported W policy is the H policy shifted by
//! `phi`; the W generator built from it is the one the forward equation uses.

use serde::Serialize;
use thiserror::Error;

use crate::calibration::WStep;
use crate::grid::{Grid, Regime, Triple};
use crate::linalg::{LinalgError, Tridiagonal};
use crate::model::{self, tfp};
use crate::Calibration;

#[derive(Debug, Error)]
pub enum HjbError {
    #[error("HJB assembly: {0}")]
    Linalg(#[from] LinalgError),
    #[error("non-finite value in regime {regime:?} at iteration {iteration}")]
    NonFinite { regime: Regime, iteration: usize },
    #[error("exercise-set policy iteration did not settle at outer iteration {iteration}")]
    ExerciseSet { iteration: usize },
    #[error("utility: {0}")]
    Domain(#[from] model::DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UpwindCase {
    Forward,
    Backward,
    ZeroDrift,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpwindPoint {
    pub slope: f64,
    pub c: f64,
    pub mu: f64,
    pub case: UpwindCase,
}

/// Consumption and drift per regime.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTriple {
    pub c: Triple<Vec<f64>>,
    pub mu: Triple<Vec<f64>>,
}

pub type ValueTriple = Triple<Vec<f64>>;

/// Upwind generator coefficients: `(L V)_i = y_i V_{i-1} + z_i V_i + x_i V_{i+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpwindCoeffs {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl UpwindCoeffs {
    /// The generator as a tridiagonal matrix in HJB orientation.
    pub fn generator(&self) -> Tridiagonal {
        Tridiagonal { lower: self.y.clone(), diag: self.z.clone(), upper: self.x.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalRegion {
    pub flags: Vec<bool>,
    pub kstar_index: Option<usize>,
    /// Lowest flagged node, `+inf` when nothing flags.
    pub kstar: f64,
}

impl SignalRegion {
    pub fn from_flags(flags: Vec<bool>, grid: &Grid) -> Self {
        let kstar_index = flags.iter().position(|&f| f);
        let kstar = kstar_index.map_or(f64::INFINITY, |i| grid.nodes[i]);
        Self { flags, kstar_index, kstar }
    }

    pub fn empty(n: usize) -> Self {
        Self { flags: vec![false; n], kstar_index: None, kstar: f64::INFINITY }
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Sup-norm change after each outer iteration.
    pub errors: Vec<f64>,
    pub converged: bool,
    /// Number of HJB system matrices checked for the M-matrix property.
    pub m_matrix_audits: usize,
}

#[derive(Debug, Clone)]
pub struct HjbSolution {
    pub values: ValueTriple,
    pub policies: PolicyTriple,
    pub region: SignalRegion,
    pub coeffs: Triple<UpwindCoeffs>,
    pub report: SolveReport,
    pub warnings: Vec<String>,
}

/// Nodes where signaling is feasible (`k >= phi`).
pub fn signal_feasible(k: f64, phi: f64) -> bool {
    k >= phi - 1e-12 * phi.max(1.0)
}

/// Upwind choice of the marginal value at node `i`.
///
/// Forward difference if the implied drift is positive, backward if the
/// implied drift is negative, otherwise zero drift. Nonpositive candidate
/// slopes are discarded.
pub fn upwind_slope(v: &[f64], i: usize, regime: Regime, cal: &Calibration, grid: &Grid) -> UpwindPoint {
    let n = v.len();
    let k = grid.nodes[i];
    let net = tfp(regime, cal) * k.powf(cal.alpha) - cal.delta * k;
    let candidate = |s: f64| -> Option<(f64, f64)> {
        (s > 0.0).then(|| {
            let c = s.powf(-1.0 / cal.gamma);
            (c, net - c)
        })
    };
    if i + 1 < n {
        let s = (v[i + 1] - v[i]) / grid.dk;
        if let Some((c, mu)) = candidate(s) {
            if mu > 0.0 {
                return UpwindPoint { slope: s, c, mu, case: UpwindCase::Forward };
            }
        }
    }
    if i > 0 {
        let s = (v[i] - v[i - 1]) / grid.dk;
        if let Some((c, mu)) = candidate(s) {
            if mu < 0.0 {
                return UpwindPoint { slope: s, c, mu, case: UpwindCase::Backward };
            }
        }
    }
    UpwindPoint { slope: model::marginal_utility(net, cal.gamma), c: net, mu: 0.0, case: UpwindCase::ZeroDrift }
}

/// Upwind policy at every node.
pub fn extract_policy(v: &[f64], regime: Regime, cal: &Calibration, grid: &Grid) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut c = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    for i in 0..n {
        let p = upwind_slope(v, i, regime, cal, grid);
        c.push(p.c);
        mu.push(p.mu);
    }
    (c, mu)
}

pub fn assemble_coeffs(mu: &[f64], sigma: f64, grid: &Grid) -> UpwindCoeffs {
    let n = mu.len();
    let diff = sigma * sigma / (2.0 * grid.dk * grid.dk);
    let mut x: Vec<f64> = mu.iter().map(|&m| m.max(0.0) / grid.dk + diff).collect();
    let mut y: Vec<f64> = mu.iter().map(|&m| -m.min(0.0) / grid.dk + diff).collect();
    y[0] = 0.0;
    x[n - 1] = 0.0;
    let z = x.iter().zip(&y).map(|(a, b)| -(a + b)).collect();
    UpwindCoeffs { x, y, z }
}

fn system_matrix(coeffs: &UpwindCoeffs, lambda_out: f64, rho: f64, dt: f64) -> Tridiagonal {
    Tridiagonal {
        lower: coeffs.y.iter().map(|v| -v).collect(),
        diag: coeffs.z.iter().map(|z| 1.0 / dt + rho + lambda_out - z).collect(),
        upper: coeffs.x.iter().map(|v| -v).collect(),
    }
}

fn utility_vec(c: &[f64], gamma: f64) -> Result<Vec<f64>, HjbError> {
    c.iter().map(|&ci| model::utility(ci, gamma).map_err(HjbError::from)).collect()
}

/// One implicit step:
/// `(1/dt + rho + lambda_out - z_i) V_i - x_i V_{i+1} - y_i V_{i-1} = V_prev_i/dt + u_i + inflow_i`.
pub fn implicit_update(
    v_prev: &[f64],
    coeffs: &UpwindCoeffs,
    u_vec: &[f64],
    lambda_out: f64,
    inflow: &[f64],
    cal: &Calibration,
    dt: f64,
) -> Result<Vec<f64>, HjbError> {
    let a = system_matrix(coeffs, lambda_out, cal.rho, dt);
    a.audit_m_matrix()?;
    let b: Vec<f64> = (0..v_prev.len()).map(|i| v_prev[i] / dt + u_vec[i] + inflow[i]).collect();
    Ok(a.solve(&b)?)
}

/// Implicit step with an exercise option:
/// `min(A V - b, V - obstacle) = 0`, where `obstacle = -inf` marks nodes
/// without the option. Returns the values and the exercise set.
#[allow(clippy::too_many_arguments)]
pub fn complementarity_update(
    v_prev: &[f64],
    coeffs: &UpwindCoeffs,
    u_vec: &[f64],
    lambda_out: f64,
    inflow: &[f64],
    obstacle: &[f64],
    cal: &Calibration,
    dt: f64,
) -> Result<Option<(Vec<f64>, Vec<bool>)>, HjbError> {
    let n = v_prev.len();
    let a = system_matrix(coeffs, lambda_out, cal.rho, dt);
    a.audit_m_matrix()?;
    let b: Vec<f64> = (0..n).map(|i| v_prev[i] / dt + u_vec[i] + inflow[i]).collect();
    let mut active = vec![false; n];
    for _ in 0..=n + 1 {
        let mut m = a.clone();
        let mut rhs = b.clone();
        for i in 0..n {
            if active[i] {
                m.lower[i] = 0.0;
                m.upper[i] = 0.0;
                m.diag[i] = 1.0;
                rhs[i] = obstacle[i];
            }
        }
        let v = m.solve(&rhs)?;
        let r = a.matvec(&v);
        let next: Vec<bool> = (0..n).map(|i| obstacle[i].is_finite() && v[i] - obstacle[i] < r[i] - b[i]).collect();
        if next == active {
            return Ok(Some((v, active)));
        }
        active = next;
    }
    Ok(None)
}

/// Signaling payoff `V_H(k_i - phi)` at feasible nodes, `-inf` elsewhere.
/// The flag reports a target below `k_min` that was clipped.
pub fn signal_payoff(v_h: &[f64], cal: &Calibration, grid: &Grid) -> (Vec<f64>, bool) {
    let mut clipped = false;
    let psi = grid
        .nodes
        .iter()
        .map(|&k| {
            if signal_feasible(k, cal.phi) {
                let t = k - cal.phi;
                clipped |= t < grid.k_min();
                grid.interp(v_h, t)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    (psi, clipped)
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub v_w: Vec<f64>,
    pub region: SignalRegion,
    pub clipped: bool,
}

/// Raise `V_W` to the signaling payoff wherever that payoff is larger.
pub fn american_projection(v_w: &[f64], v_h: &[f64], cal: &Calibration, grid: &Grid) -> Projection {
    let (psi, clipped) = signal_payoff(v_h, cal, grid);
    let mut out = v_w.to_vec();
    let mut flags = vec![false; v_w.len()];
    for i in 0..out.len() {
        if psi[i] > out[i] {
            out[i] = psi[i];
            flags[i] = true;
        }
    }
    Projection { v_w: out, region: SignalRegion::from_flags(flags, grid), clipped }
}

#[derive(Debug, Clone)]
pub struct WPolicy {
    pub c: Vec<f64>,
    pub mu: Vec<f64>,
    pub coeffs: UpwindCoeffs,
    pub clipped: bool,
}

/// W policy after projection: upwind in the wait region, H policy shifted by
/// `phi` in the signal region.
pub fn recompute_w_policy(
    v_w: &[f64],
    c_h: &[f64],
    mu_h: &[f64],
    region: &SignalRegion,
    cal: &Calibration,
    grid: &Grid,
) -> WPolicy {
    let (mut c, mut mu) = extract_policy(v_w, Regime::W, cal, grid);
    let mut clipped = false;
    for (i, &flag) in region.flags.iter().enumerate() {
        if flag {
            let t = grid.nodes[i] - cal.phi;
            clipped |= t < grid.k_min();
            c[i] = grid.interp(c_h, t);
            mu[i] = grid.interp(mu_h, t);
        }
    }
    let coeffs = assemble_coeffs(&mu, cal.sigma, grid);
    WPolicy { c, mu, coeffs, clipped }
}

/// Signaling surplus `D(k_i) = V_W(k_i) - V_H(k_i - phi)`; `None` below `phi`.
pub fn surplus(values: &ValueTriple, cal: &Calibration, grid: &Grid) -> Vec<Option<f64>> {
    grid.nodes
        .iter()
        .enumerate()
        .map(|(i, &k)| signal_feasible(k, cal.phi).then(|| values.w[i] - grid.interp(&values.h, k - cal.phi)))
        .collect()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

const CLIP_WARNING: &str = "signaling target k - phi fell below k_min and was clipped";

pub fn solve_hjb(cal: &Calibration) -> Result<HjbSolution, HjbError> {
    let grid = Grid::from_calibration(cal);
    let n = grid.len();
    let init = |r: Regime| -> Result<Vec<f64>, HjbError> {
        grid.nodes
            .iter()
            .map(|&k| Ok(model::utility(model::zero_drift_consumption(k, r, cal), cal.gamma)? / cal.rho))
            .collect()
    };
    let mut v = Triple::new(init(Regime::L)?, init(Regime::W)?, init(Regime::H)?);
    let (mut c_h, mut mu_h) = extract_policy(&v.h, Regime::H, cal, &grid);
    let (c_w0, mu_w0) = extract_policy(&v.w, Regime::W, cal, &grid);
    let mut w_pol = WPolicy { coeffs: assemble_coeffs(&mu_w0, cal.sigma, &grid), c: c_w0, mu: mu_w0, clipped: false };
    let mut region = SignalRegion::empty(n);
    let mut report = SolveReport { iterations: 0, errors: Vec::new(), converged: false, m_matrix_audits: 0 };
    let mut warnings = Vec::new();
    let mut clipped = false;

    for it in 1..=cal.max_iter {
        let dt = cal.dt_at(it);

        let (c_l, mu_l) = extract_policy(&v.l, Regime::L, cal, &grid);
        let coeffs_l = assemble_coeffs(&mu_l, cal.sigma, &grid);
        let inflow_l: Vec<f64> = v.w.iter().map(|x| cal.lambda_lh * x).collect();
        let v_l = implicit_update(&v.l, &coeffs_l, &utility_vec(&c_l, cal.gamma)?, cal.lambda_lh, &inflow_l, cal, dt)?;
        report.m_matrix_audits += 1;

        let inflow_w: Vec<f64> = v_l.iter().map(|x| cal.lambda_hl * x).collect();
        let (v_w, new_region) = match cal.w_step {
            WStep::Complementarity => {
                let (c_w, mu_w) = extract_policy(&v.w, Regime::W, cal, &grid);
                let coeffs_w = assemble_coeffs(&mu_w, cal.sigma, &grid);
                let (psi, _) = signal_payoff(&v.h, cal, &grid);
                let u_w = utility_vec(&c_w, cal.gamma)?;
                let (v_w, active) =
                    complementarity_update(&v.w, &coeffs_w, &u_w, cal.lambda_hl, &inflow_w, &psi, cal, dt)?
                        .ok_or(HjbError::ExerciseSet { iteration: it })?;
                report.m_matrix_audits += 1;
                let proj = american_projection(&v_w, &v.h, cal, &grid);
                let flags = active.iter().zip(&proj.region.flags).map(|(a, b)| *a || *b).collect();
                (proj.v_w, SignalRegion::from_flags(flags, &grid))
            }
            WStep::Project => {
                let u_w = utility_vec(&w_pol.c, cal.gamma)?;
                let v_w = implicit_update(&v.w, &w_pol.coeffs, &u_w, cal.lambda_hl, &inflow_w, cal, dt)?;
                report.m_matrix_audits += 1;
                let proj = american_projection(&v_w, &v.h, cal, &grid);
                (proj.v_w, proj.region)
            }
        };
        region = new_region;
        w_pol = recompute_w_policy(&v_w, &c_h, &mu_h, &region, cal, &grid);
        clipped |= w_pol.clipped;

        let coeffs_h = assemble_coeffs(&mu_h, cal.sigma, &grid);
        let inflow_h: Vec<f64> = v_l.iter().map(|x| cal.lambda_hl * x).collect();
        let v_h = implicit_update(&v.h, &coeffs_h, &utility_vec(&c_h, cal.gamma)?, cal.lambda_hl, &inflow_h, cal, dt)?;
        report.m_matrix_audits += 1;

        for (r, vec) in [(Regime::L, &v_l), (Regime::W, &v_w), (Regime::H, &v_h)] {
            if vec.iter().any(|x| !x.is_finite()) {
                return Err(HjbError::NonFinite { regime: r, iteration: it });
            }
        }
        let err = sup_diff(&v_l, &v.l).max(sup_diff(&v_w, &v.w)).max(sup_diff(&v_h, &v.h));
        v = Triple::new(v_l, v_w, v_h);
        (c_h, mu_h) = extract_policy(&v.h, Regime::H, cal, &grid);
        report.iterations = it;
        report.errors.push(err);
        if err < cal.tol {
            report.converged = true;
            break;
        }
    }
    if !report.converged {
        warnings.push(format!("HJB iteration did not converge within {} iterations", cal.max_iter));
    }

    let (c_l, mu_l) = extract_policy(&v.l, Regime::L, cal, &grid);
    let w_final = recompute_w_policy(&v.w, &c_h, &mu_h, &region, cal, &grid);
    clipped |= w_final.clipped;
    if clipped {
        warnings.push(CLIP_WARNING.to_string());
    }
    let coeffs =
        Triple::new(assemble_coeffs(&mu_l, cal.sigma, &grid), w_final.coeffs, assemble_coeffs(&mu_h, cal.sigma, &grid));
    let policies = PolicyTriple { c: Triple::new(c_l, w_final.c, c_h), mu: Triple::new(mu_l, w_final.mu, mu_h) };
    Ok(HjbSolution { values: v, policies, region, coeffs, report, warnings })
}

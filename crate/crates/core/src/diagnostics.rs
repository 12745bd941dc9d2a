//! Equilibrium statistics computed from solved artifacts.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::grid::{Grid, Regime, Triple};
use crate::hjb::{self, HjbSolution, PolicyTriple, SignalRegion};
use crate::kfe::DensityTriple;
use crate::model::{self, DomainError};
use crate::Calibration;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("mean wealth is zero")]
    ZeroMean,
    #[error("output is zero at k = {0}")]
    ZeroOutput(f64),
    #[error("Euler decomposition is defined for L and H only, got {0:?}")]
    EulerRegime(Regime),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Zero crossings of the drift from + to -, located by linear interpolation.
/// A zero-drift top node is a boundary artifact and is not counted.
pub fn find_attractors(mu: &[f64], grid: &Grid) -> Vec<f64> {
    let n = mu.len();
    let mut out = Vec::new();
    for i in 0..n.saturating_sub(1) {
        let (a, b) = (mu[i], mu[i + 1]);
        let crosses = a > 0.0 && (b < 0.0 || (b == 0.0 && i + 1 < n - 1));
        if crosses {
            out.push(grid.nodes[i] + grid.dk * a / (a - b));
        }
    }
    out
}

/// Attractor closest to `reference`.
pub fn nearest(attractors: &[f64], reference: f64) -> Option<f64> {
    attractors.iter().copied().min_by(|a, b| (a - reference).abs().total_cmp(&(b - reference).abs()))
}

/// Node-wise first derivative: central inside, one-sided at the ends.
pub fn node_slopes(v: &[f64], grid: &Grid) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| match i {
            0 => (v[1] - v[0]) / grid.dk,
            _ if i == n - 1 => (v[n - 1] - v[n - 2]) / grid.dk,
            _ => (v[i + 1] - v[i - 1]) / (2.0 * grid.dk),
        })
        .collect()
}

/// Node-wise second derivative with stencil half-width `h` nodes; rows too
/// close to the boundary reuse the nearest valid row.
pub fn node_curvature(v: &[f64], grid: &Grid, h: usize) -> Vec<f64> {
    let n = v.len();
    let step = h as f64 * grid.dk;
    (0..n)
        .map(|i| {
            let j = i.clamp(h, n - 1 - h);
            (v[j + h] - 2.0 * v[j] + v[j - h]) / (step * step)
        })
        .collect()
}

/// Marginal propensity to consume out of wealth at `k`.
pub fn mpc(c: &[f64], grid: &Grid, k: f64) -> f64 {
    grid.interp(&node_slopes(c, grid), k)
}

/// Consumption over gross output at `k`.
pub fn apc(c: &[f64], regime: Regime, cal: &Calibration, grid: &Grid, k: f64) -> Result<f64, DiagnosticsError> {
    let f = model::production(k, regime, cal)?;
    if f <= 0.0 {
        return Err(DiagnosticsError::ZeroOutput(k));
    }
    Ok(grid.interp(c, k) / f)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedMpc {
    #[serde(rename = "L")]
    pub l: Option<f64>,
    #[serde(rename = "W")]
    pub w: Option<f64>,
    #[serde(rename = "H")]
    pub h: Option<f64>,
    pub aggregate: Option<f64>,
}

/// Density-weighted average of node-wise MPCs, per regime and overall.
pub fn weighted_mpc(density: &DensityTriple, policies: &PolicyTriple, grid: &Grid) -> WeightedMpc {
    let mut num_all = 0.0;
    let mut den_all = 0.0;
    let per = Regime::ALL.map(|r| {
        let m = node_slopes(policies.c.get(r), grid);
        let g = density.g.get(r);
        let num: f64 = m.iter().zip(g).map(|(a, b)| a * b).sum();
        let den: f64 = g.iter().sum();
        num_all += num;
        den_all += den;
        (den > 0.0).then(|| num / den)
    });
    WeightedMpc { l: per[0], w: per[1], h: per[2], aggregate: (den_all > 0.0).then(|| num_all / den_all) }
}

/// Gini of a discrete distribution: `sum_i sum_m w_i w_m |k_i - k_m| / (2 W sum_i w_i k_i)`.
pub fn gini_points(points: &[f64], weights: &[f64]) -> Result<f64, DiagnosticsError> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| points[a].total_cmp(&points[b]));
    let total: f64 = weights.iter().sum();
    let moment: f64 = points.iter().zip(weights).map(|(k, w)| k * w).sum();
    if !(moment.abs() > 0.0) || total <= 0.0 {
        return Err(DiagnosticsError::ZeroMean);
    }
    // sum over ordered pairs via prefix sums of weight and weighted position
    let (mut cw, mut ck, mut acc) = (0.0, 0.0, 0.0);
    for &i in &idx {
        acc += weights[i] * (points[i] * cw - ck);
        cw += weights[i];
        ck += weights[i] * points[i];
    }
    Ok(2.0 * acc / (2.0 * total * moment))
}

pub fn gini(g: &[f64], grid: &Grid) -> Result<f64, DiagnosticsError> {
    let w: Vec<f64> = g.iter().map(|v| v * grid.dk).collect();
    gini_points(&grid.nodes, &w)
}

pub fn mean_wealth(g: &[f64], grid: &Grid) -> f64 {
    grid.dk * grid.nodes.iter().zip(g).map(|(k, v)| k * v).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EulerTerms {
    /// `f'(k) - delta - rho`.
    pub ramsey: f64,
    /// `0.5 gamma (gamma+1) sigma^2 c''/c` with the narrowest stencil.
    pub precautionary: f64,
    /// Range of the precautionary term over stencil half-widths 1..=3 nodes.
    pub precautionary_band: (f64, f64),
    /// `-lambda_out (1 - u'(c_other)/u'(c))`.
    pub switching: f64,
    pub bracket_sum: f64,
    /// Evaluation point lies within two nodes of the threshold.
    pub unreliable: bool,
}

pub fn euler_decomposition(
    policies: &PolicyTriple,
    region: &SignalRegion,
    cal: &Calibration,
    grid: &Grid,
    k: f64,
    regime: Regime,
) -> Result<EulerTerms, DiagnosticsError> {
    let (other, lambda_out) = match regime {
        Regime::L => (Regime::W, cal.lambda_lh),
        Regime::H => (Regime::L, cal.lambda_hl),
        Regime::W => return Err(DiagnosticsError::EulerRegime(regime)),
    };
    let c = policies.c.get(regime);
    let cj = grid.interp(c, k);
    let c_other = grid.interp(policies.c.get(other), k);
    let scale = 0.5 * cal.gamma * (cal.gamma + 1.0) * cal.sigma * cal.sigma / cj;
    let prec: Vec<f64> = (1..=3).map(|h| scale * grid.interp(&node_curvature(c, grid, h), k)).collect();
    let band = prec.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    let ramsey = model::marginal_product(k, regime, cal) - cal.delta - cal.rho;
    let ratio = model::marginal_utility(c_other, cal.gamma) / model::marginal_utility(cj, cal.gamma);
    let switching = -lambda_out * (1.0 - ratio);
    Ok(EulerTerms {
        ramsey,
        precautionary: prec[0],
        precautionary_band: band,
        switching,
        bracket_sum: ramsey + prec[0] + switching,
        unreliable: (k - region.kstar).abs() <= 2.0 * grid.dk,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Separation {
    pub gap: f64,
    pub sigma_ss_l: f64,
    pub sigma_ss_h: f64,
    pub factor: f64,
    pub satisfied: bool,
}

/// Local Gaussian width of each attractor, `sigma / sqrt(2 |mu'|)`, against the gap.
pub fn separation_check(kss_l: f64, kss_h: f64, policies: &PolicyTriple, cal: &Calibration, grid: &Grid) -> Separation {
    let width = |r: Regime, k: f64| {
        let slope = grid.interp(&node_slopes(policies.mu.get(r), grid), k).abs();
        if slope < 1e-8 {
            f64::INFINITY
        } else {
            cal.sigma / (2.0 * slope).sqrt()
        }
    };
    let (sl, sh) = (width(Regime::L, kss_l), width(Regime::H, kss_h));
    let gap = kss_h - kss_l;
    Separation {
        gap,
        sigma_ss_l: sl,
        sigma_ss_h: sh,
        factor: cal.separation_factor,
        satisfied: (sl + sh).is_finite() && gap > cal.separation_factor * (sl + sh),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Peak {
    pub location: f64,
    pub height: f64,
    pub prominence: f64,
}

/// Local maxima whose height exceeds the higher of the two bounding troughs by
/// more than `prominence * max(g)`; sorted by location.
pub fn bimodality(g: &[f64], grid: &Grid, prominence: f64) -> Vec<Peak> {
    let n = g.len();
    let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut peaks = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && g[j + 1] == g[i] {
            j += 1;
        }
        let left_lower = i == 0 || g[i - 1] < g[i];
        let right_lower = j == n - 1 || g[j + 1] < g[i];
        if left_lower && right_lower && !(i == 0 && j == n - 1) {
            let h = g[i];
            let mut left_min = h;
            for &v in g[..i].iter().rev() {
                if v > h {
                    break;
                }
                left_min = left_min.min(v);
            }
            let mut right_min = h;
            for &v in &g[j + 1..] {
                if v > h {
                    break;
                }
                right_min = right_min.min(v);
            }
            let prom = h - left_min.max(right_min);
            let prom = if i == 0 || j == n - 1 {
                // edge maxima are bounded by the single interior trough
                h - if i == 0 { right_min } else { left_min }
            } else {
                prom
            };
            if prom > prominence * gmax {
                let mid = 0.5 * (grid.nodes[i] + grid.nodes[j]);
                peaks.push(Peak { location: mid, height: h, prominence: prom });
            }
        }
        i = j + 1;
    }
    peaks
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phenotypes {
    pub hand_to_mouth: f64,
    pub structurally_trapped: f64,
    /// Part of `structurally_trapped` with `2 <= k <= phi`.
    pub trapped_residual_below_phi: f64,
    pub frustrated_aspirants: f64,
    pub decaying_rentiers: f64,
    pub successful_signalers: f64,
    /// No threshold exists; only regime masses are meaningful.
    pub degenerate: bool,
}

impl Phenotypes {
    pub fn total(&self) -> f64 {
        self.hand_to_mouth
            + self.structurally_trapped
            + self.frustrated_aspirants
            + self.decaying_rentiers
            + self.successful_signalers
    }
}

pub const HAND_TO_MOUTH_CUTOFF: f64 = 2.0;

pub fn phenotypes(density: &DensityTriple, region: &SignalRegion, cal: &Calibration, grid: &Grid) -> Phenotypes {
    let mass = |g: &[f64], pred: &dyn Fn(f64) -> bool| -> f64 {
        grid.dk * grid.nodes.iter().zip(g).filter(|(k, _)| pred(**k)).map(|(_, v)| v).sum::<f64>()
    };
    let ks = region.kstar;
    let gl = &density.g.l;
    let htm = mass(gl, &|k| k < HAND_TO_MOUTH_CUTOFF);
    let degenerate = !ks.is_finite();
    let trapped = mass(gl, &|k| k >= HAND_TO_MOUTH_CUTOFF && k <= ks);
    let residual = mass(gl, &|k| k >= HAND_TO_MOUTH_CUTOFF && k <= cal.phi && k <= ks);
    let rentiers = if degenerate { 0.0 } else { mass(gl, &|k| k > ks) };
    Phenotypes {
        hand_to_mouth: htm,
        structurally_trapped: trapped,
        trapped_residual_below_phi: residual,
        frustrated_aspirants: mass(&density.g.w, &|_| true),
        decaying_rentiers: rentiers,
        successful_signalers: mass(&density.g.h, &|_| true),
        degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeClass {
    Immediate,
    Interior,
    None,
}

impl RegimeClass {
    pub fn label(self) -> &'static str {
        match self {
            RegimeClass::Immediate => "immediate",
            RegimeClass::Interior => "interior",
            RegimeClass::None => "none",
        }
    }
}

pub fn regime_class(region: &SignalRegion, cal: &Calibration, grid: &Grid) -> RegimeClass {
    let first_feasible = grid.nodes.iter().position(|&k| hjb::signal_feasible(k, cal.phi));
    match region.kstar_index {
        None => RegimeClass::None,
        Some(i) if Some(i) == first_feasible => RegimeClass::Immediate,
        Some(_) => RegimeClass::Interior,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Shares {
    pub pi_l: f64,
    pub pi_w: f64,
    pub pi_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    #[serde(rename = "kss_L")]
    pub kss_l: Option<f64>,
    #[serde(rename = "kss_H")]
    pub kss_h: Option<f64>,
    #[serde(rename = "kss_L_det")]
    pub kss_l_det: f64,
    #[serde(rename = "kss_H_det")]
    pub kss_h_det: f64,
    pub attractors: BTreeMap<String, Vec<f64>>,
    /// `None` when nothing flags (no signaling).
    pub kstar: Option<f64>,
    pub wait_zone_width: Option<f64>,
    pub regime_class: RegimeClass,
    /// Surplus at the first node with `k >= phi`.
    pub surplus_at_phi: Option<f64>,
    pub surplus_nonincreasing: bool,
    pub mpc_at: BTreeMap<String, f64>,
    pub apc_at: BTreeMap<String, f64>,
    /// `f'(k) - delta` at each attractor.
    pub net_return_at: BTreeMap<String, f64>,
    /// `f'(k) - delta - rho` at each attractor.
    pub euler_gap: BTreeMap<String, f64>,
    pub euler: BTreeMap<String, EulerTerms>,
    pub weighted_mpc: WeightedMpc,
    pub gini: f64,
    pub mean_wealth: f64,
    pub shares: Shares,
    pub peaks: Vec<Peak>,
    pub separation: Option<Separation>,
    pub phenotype_shares: Phenotypes,
    pub notes: Vec<String>,
}

/// Largest increase of the surplus over consecutive nodes in `[phi, k*]`.
pub fn surplus_max_increase(d: &[Option<f64>], region: &SignalRegion) -> f64 {
    let end = region.kstar_index.unwrap_or(d.len() - 1);
    let vals: Vec<f64> = d[..=end].iter().flatten().copied().collect();
    vals.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
}

impl DiagnosticsReport {
    pub fn compute(
        hjb: &HjbSolution,
        density: &DensityTriple,
        cal: &Calibration,
        grid: &Grid,
    ) -> Result<Self, DiagnosticsError> {
        let kss_l_det = model::deterministic_steady_state(Regime::L, cal)?;
        let kss_h_det = model::deterministic_steady_state(Regime::H, cal)?;
        let pol = &hjb.policies;
        let found: Triple<Vec<f64>> = pol.mu.map(|_, mu| find_attractors(mu, grid));
        let kss_l = nearest(&found.l, kss_l_det);
        let kss_h = nearest(&found.h, kss_h_det);
        let mut notes = hjb.warnings.clone();

        let mut mpc_at = BTreeMap::new();
        let mut apc_at = BTreeMap::new();
        let mut net_return_at = BTreeMap::new();
        let mut euler_gap = BTreeMap::new();
        let mut euler = BTreeMap::new();
        for (r, k) in [(Regime::L, kss_l), (Regime::H, kss_h)] {
            let Some(k) = k else {
                notes.push(format!("no attractor found in regime {}", r.label()));
                continue;
            };
            let key = r.label().to_string();
            let c = pol.c.get(r);
            mpc_at.insert(key.clone(), mpc(c, grid, k));
            apc_at.insert(key.clone(), apc(c, r, cal, grid, k)?);
            let net = model::marginal_product(k, r, cal) - cal.delta;
            net_return_at.insert(key.clone(), net);
            euler_gap.insert(key.clone(), net - cal.rho);
            euler.insert(key, euler_decomposition(pol, &hjb.region, cal, grid, k, r)?);
        }

        let total = density.total();
        let s = density.shares(grid);
        let d = hjb::surplus(&hjb.values, cal, grid);
        let surplus_at_phi = d.iter().flatten().next().copied();
        let region = &hjb.region;
        let kstar = region.kstar.is_finite().then_some(region.kstar);
        if kstar.is_none() {
            notes.push("no signaling (k* = +inf)".to_string());
        }
        let pheno = phenotypes(density, region, cal, grid);
        if pheno.degenerate {
            notes.push("phenotype split degenerates to regime masses without a threshold".to_string());
        }
        Ok(Self {
            kss_l,
            kss_h,
            kss_l_det,
            kss_h_det,
            attractors: [("L", &found.l), ("W", &found.w), ("H", &found.h)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            kstar,
            wait_zone_width: kstar.map(|k| k - cal.phi),
            regime_class: regime_class(region, cal, grid),
            surplus_at_phi,
            surplus_nonincreasing: kstar.is_some() && surplus_max_increase(&d, region) <= 1e-6,
            mpc_at,
            apc_at,
            net_return_at,
            euler_gap,
            euler,
            weighted_mpc: weighted_mpc(density, pol, grid),
            gini: gini(&total, grid)?,
            mean_wealth: mean_wealth(&total, grid),
            shares: Shares { pi_l: s.l, pi_w: s.w, pi_h: s.h },
            peaks: bimodality(&total, grid, cal.peak_prominence),
            separation: kss_l.zip(kss_h).map(|(l, h)| separation_check(l, h, pol, cal, grid)),
            phenotype_shares: pheno,
            notes,
        })
    }
}

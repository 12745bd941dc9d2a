//! Invariants of the converged solution, stationary density and diagnostics.

use std::sync::OnceLock;

use proptest::prelude::*;
use twinpeaks::diagnostics::{self, find_attractors};
use twinpeaks::hjb::{self, HjbSolution};
use twinpeaks::kfe;
use twinpeaks::pipeline::{self, SolveOutcome};
use twinpeaks::{Calibration, Grid, Regime};

fn baseline() -> &'static SolveOutcome {
    static OUT: OnceLock<SolveOutcome> = OnceLock::new();
    OUT.get_or_init(|| pipeline::run_model(&Calibration::baseline()).unwrap())
}

fn fine() -> &'static SolveOutcome {
    static OUT: OnceLock<SolveOutcome> = OnceLock::new();
    OUT.get_or_init(|| {
        let mut cal = Calibration::baseline();
        cal.n = 1001;
        pipeline::run_model(&cal).unwrap()
    })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn value_ordering() {
    let v = &baseline().hjb.values;
    let scale = max_abs(&v.l).max(max_abs(&v.w)).max(max_abs(&v.h));
    for i in 0..v.l.len() {
        assert!(v.h[i] > v.w[i], "V_H <= V_W at node {i}");
        assert!(v.w[i] >= v.l[i] - 1e-8 * scale, "V_W < V_L at node {i}");
    }
}

#[test]
fn american_constraint() {
    let cal = Calibration::baseline();
    let out = baseline();
    let v = &out.hjb.values;
    let scale = max_abs(&v.w);
    for (i, d) in hjb::surplus(v, &cal, &out.grid).iter().enumerate() {
        if let Some(d) = d {
            assert!(*d >= -1e-9 * scale, "surplus {d} at node {i}");
        }
    }
}

#[test]
fn discrete_concavity() {
    let out = baseline();
    let n = out.grid.len();
    let exempt = out.hjb.region.kstar_index.map(|i| [i - 1, i]).unwrap_or([usize::MAX; 2]);
    let mut convex = Vec::new();
    for r in Regime::ALL {
        let v = out.hjb.values.get(r);
        for i in 1..n - 1 {
            if r == Regime::W && exempt.contains(&i) {
                continue;
            }
            let d2 = v[i + 1] - 2.0 * v[i] + v[i - 1];
            if d2 > 1e-8 {
                convex.push((r.label(), out.grid.nodes[i], d2));
            }
        }
    }
    assert!(convex.is_empty(), "{} convex nodes, e.g. {:?}", convex.len(), &convex[..convex.len().min(5)]);
}

fn pasting_residual(sol: &HjbSolution, cal: &Calibration) -> (f64, f64) {
    let grid = Grid::from_calibration(cal);
    let i = sol.region.kstar_index.unwrap();
    let (v, dk) = (&sol.values, grid.dk);
    let left = (v.w[i] - v.w[i - 1]) / dk;
    let k = grid.nodes[i] - cal.phi;
    let vh = |x: f64| grid.interp(&v.h, x);
    let slope_h = (vh(k + 0.5 * dk) - vh(k - 0.5 * dk)) / dk;
    ((left - slope_h).abs(), dk)
}

#[test]
fn smooth_pasting_is_first_order() {
    let residual = |n: usize| {
        let mut cal = Calibration::baseline();
        cal.n = n;
        pasting_residual(&hjb::solve_hjb(&cal).unwrap(), &cal)
    };
    // C from the coarse grids, checked on the finer ones
    let c = [251, 501, 1001].iter().map(|&n| residual(n)).map(|(r, dk)| r / dk).fold(0.0, f64::max);
    for n in [2001, 4001] {
        let (r, dk) = residual(n);
        assert!(r <= c * dk, "N={n}: residual {r:.3e} exceeds C*dk = {:.3e}", c * dk);
    }
}

#[test]
fn monotone_consumption_in_l_and_h() {
    let p = &baseline().hjb.policies;
    for r in [Regime::L, Regime::H] {
        let c = p.c.get(r);
        for i in 1..c.len() {
            assert!(c[i] >= c[i - 1] - 1e-12, "{} consumption falls at node {i}", r.label());
        }
    }
}

#[test]
fn final_systems_are_m_matrices() {
    let cal = Calibration::baseline();
    let sol = &baseline().hjb;
    assert_eq!(sol.report.m_matrix_audits, 3 * sol.report.iterations);
    for (r, out) in [(Regime::L, cal.lambda_lh), (Regime::W, cal.lambda_hl), (Regime::H, cal.lambda_hl)] {
        let g = sol.coeffs.get(r).generator();
        let shift = 1.0 / cal.dt + cal.rho + out;
        let a = twinpeaks::linalg::Tridiagonal {
            lower: g.lower.iter().map(|v| -v).collect(),
            diag: g.diag.iter().map(|v| shift - v).collect(),
            upper: g.upper.iter().map(|v| -v).collect(),
        };
        a.audit_m_matrix().unwrap();
    }
}

#[test]
fn single_zero_crossing_of_drift() {
    let out = baseline();
    let n = out.grid.len();
    for r in [Regime::L, Regime::H] {
        let mu = out.hjb.policies.mu.get(r);
        let down = (1..n - 1).filter(|&i| mu[i - 1] > 0.0 && mu[i] <= 0.0).count();
        assert_eq!(down, 1, "regime {}", r.label());
        let a = find_attractors(mu, &out.grid);
        assert!(out.grid.interp(mu, a[0]).abs() < 1e-6);
    }
}

#[test]
fn grid_refinement_moves_less_than_a_cell() {
    let (a, b) = (&baseline().report, &fine().report);
    let dk = baseline().grid.dk;
    assert!((a.kstar.unwrap() - b.kstar.unwrap()).abs() < dk);
    assert!((a.kss_l.unwrap() - b.kss_l.unwrap()).abs() < dk);
    assert!((a.kss_h.unwrap() - b.kss_h.unwrap()).abs() < dk);
}

#[test]
fn kfe_blocks_are_exact_transposes() {
    let mut cal = Calibration::baseline();
    cal.n = 48;
    let grid = Grid::from_calibration(&cal);
    let sol = hjb::solve_hjb(&cal).unwrap();
    let sys = kfe::assemble_kfe(&sol, &cal, &grid).unwrap();
    let n = grid.len();
    let dense = sys.matrix.to_dense();
    for r in Regime::ALL {
        let g = sol.coeffs.get(r).generator();
        let off = r.index() * n;
        for i in 0..n {
            if off + i == sys.normalization_row {
                continue;
            }
            for j in 0..n {
                let gji = match i as isize - j as isize {
                    0 => g.diag[j],
                    1 => g.upper[j],
                    -1 => g.lower[j],
                    _ => 0.0,
                };
                let drain = if i != j {
                    0.0
                } else {
                    match r {
                        Regime::L => cal.lambda_lh,
                        Regime::W if sol.region.flags[i] => cal.lambda_bar,
                        Regime::W | Regime::H => cal.lambda_hl,
                    }
                };
                assert_eq!(dense[off + i][off + j], gji - drain, "block {} entry ({i},{j})", r.label());
            }
        }
    }
}

#[test]
fn stationary_flux_balance() {
    let cal = Calibration::baseline();
    let out = baseline();
    let sys = kfe::assemble_kfe(&out.hjb, &cal, &out.grid).unwrap();
    let n = out.grid.len();
    let g: Vec<f64> = Regime::ALL.iter().flat_map(|&r| out.density.g.get(r).clone()).collect();
    let mg = sys.matrix.matvec(&g);
    for r in Regime::ALL {
        let worst = (r.index() * n..(r.index() + 1) * n)
            .filter(|&row| row != sys.normalization_row)
            .map(|row| (mg[row] * out.grid.dk).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "regime {} flux {worst:.2e}", r.label());
    }
    assert!(out.density.flux_residual < 1e-10);
}

#[test]
fn normalization_row_choice_is_immaterial() {
    let mut cal = Calibration::baseline();
    cal.normalization_row = Some(0);
    let alt = pipeline::run_model(&cal).unwrap().report.shares;
    let base = &baseline().report.shares;
    assert!((alt.pi_l - base.pi_l).abs() < 1e-8);
    assert!((alt.pi_h - base.pi_h).abs() < 1e-8);
}

#[test]
fn bimodal_baseline_density() {
    assert_eq!(baseline().report.peaks.len(), 2);
}

#[test]
fn phenotypes_reconcile_with_shares() {
    let r = &baseline().report;
    let p = &r.phenotype_shares;
    assert!((p.hand_to_mouth + p.structurally_trapped + p.decaying_rentiers - r.shares.pi_l).abs() < 1e-9);
    assert!((p.frustrated_aspirants - r.shares.pi_w).abs() < 1e-9);
    assert!((p.successful_signalers - r.shares.pi_h).abs() < 1e-9);
    assert!((p.total() - 1.0).abs() < 1e-9);
}

#[test]
fn quiet_single_regime_attractors_match_closed_form() {
    let mut cal = Calibration::baseline();
    cal.sigma = 0.01;
    cal.lambda_lh = 0.0;
    cal.lambda_hl = 0.0;
    let grid = Grid::from_calibration(&cal);
    let sol = hjb::solve_hjb(&cal).unwrap();
    for r in [Regime::L, Regime::H] {
        let want = twinpeaks::model::deterministic_steady_state(r, &cal).unwrap();
        let got = find_attractors(sol.policies.mu.get(r), &grid);
        assert_eq!(got.len(), 1, "regime {}", r.label());
        assert!((got[0] - want).abs() <= grid.dk, "{} attractor {} vs {want}", r.label(), got[0]);
    }
}

#[test]
fn zero_signaling_when_phi_is_prohibitive() {
    let mut cal = Calibration::baseline();
    cal.phi = 40.0;
    let out = pipeline::run_model(&cal).unwrap();
    assert_eq!(out.hjb.region.count(), 0);
    assert!(out.report.kstar.is_none());
    assert!(out.report.shares.pi_h < 1e-6);
    assert_eq!(out.report.regime_class, diagnostics::RegimeClass::None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    // Assembled forward operators conserve mass for any admissible calibration.
    #[test]
    fn kfe_conserves_mass(sigma in 0.1f64..0.6, phi in 4.0f64..14.0, lhl in 0.001f64..0.02, llh in 0.001f64..0.02) {
        let mut cal = Calibration::baseline();
        cal.n = 201;
        cal.sigma = sigma;
        cal.phi = phi;
        cal.lambda_hl = lhl;
        cal.lambda_lh = llh;
        let out = pipeline::run_model(&cal).unwrap();
        prop_assert!(out.max_column_sum < 1e-10);
        let mass: f64 = out.density.total().iter().sum::<f64>() * out.grid.dk;
        prop_assert!((mass - 1.0).abs() < 1e-10);
        let min = Regime::ALL.iter().flat_map(|&r| out.density.g.get(r).iter().copied()).fold(f64::INFINITY, f64::min);
        prop_assert!(min >= -1e-10);
        let v = &out.hjb.values;
        for i in 0..v.l.len() {
            prop_assert!(v.h[i] > v.w[i]);
        }
    }
}

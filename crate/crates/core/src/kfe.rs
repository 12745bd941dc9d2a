//! Stationary forward equation on the 3N state space.
//!
//! Unknowns are stacked as `[g_L; g_W; g_H]`. Generators are the transposes of
//! the HJB upwind generators. Mass in the W signal region drains at rate
//! `lambda_bar` and reappears in H at `k - phi`, split linearly between the two
//! bracketing nodes.

use serde::Serialize;
use thiserror::Error;

use crate::grid::{Grid, Regime, Triple};
use crate::hjb::{HjbSolution, SignalRegion, UpwindCoeffs};
use crate::linalg::{self, LinalgError, SparseMatrix, Tridiagonal};
use crate::Calibration;

#[derive(Debug, Error)]
pub enum KfeError {
    #[error("column {column} of the forward operator sums to {sum:e}")]
    Conservation { column: usize, sum: f64 },
    #[error("forward system: {0}")]
    Linalg(#[from] LinalgError),
    #[error("negative density mass {mass:e} exceeds the clipping budget")]
    NegativeDensity { mass: f64 },
    #[error("both switching rates are zero")]
    NoSwitching,
}

/// Transpose of the HJB generator:
/// `(L^T)_{i,i-1} = x_{i-1}`, `(L^T)_{i,i} = z_i`, `(L^T)_{i,i+1} = y_{i+1}`.
pub fn transpose_generator(c: &UpwindCoeffs) -> Tridiagonal {
    let n = c.z.len();
    let lower = (0..n).map(|i| if i == 0 { 0.0 } else { c.x[i - 1] }).collect();
    let upper = (0..n).map(|i| if i + 1 == n { 0.0 } else { c.y[i + 1] }).collect();
    Tridiagonal { lower, diag: c.z.clone(), upper }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferColumn {
    /// Lower receiving H node.
    pub target: usize,
    /// Fraction sent to `target + 1`.
    pub omega: f64,
}

/// Non-local transfer `S` from W column `i` into H rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub lambda_bar: f64,
    pub columns: Vec<Option<TransferColumn>>,
}

impl TransferMatrix {
    /// Nonzero entries `(row, column, value)`.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, col) in self.columns.iter().enumerate() {
            if let Some(t) = col {
                // round the larger share; the subtraction is then exact and the
                // column sums to lambda_bar bit for bit
                let lb = self.lambda_bar;
                let (lower, upper) = if t.omega >= 0.5 {
                    let u = lb * t.omega;
                    (lb - u, u)
                } else {
                    let l = lb * (1.0 - t.omega);
                    (l, lb - l)
                };
                out.push((t.target, i, lower));
                if upper > 0.0 {
                    out.push((t.target + 1, i, upper));
                }
            }
        }
        out
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.columns.len()];
        for (_, c, v) in self.entries() {
            s[c] += v;
        }
        s
    }
}

/// Transfer matrix for a signal region. The flag reports a clipped target.
pub fn build_transfer(region: &SignalRegion, cal: &Calibration, grid: &Grid) -> (TransferMatrix, bool) {
    let mut clipped = false;
    let columns = region
        .flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            f.then(|| {
                let loc = grid.locate(grid.nodes[i] - cal.phi);
                clipped |= loc.clipped;
                TransferColumn { target: loc.lower, omega: loc.omega }
            })
        })
        .collect();
    (TransferMatrix { lambda_bar: cal.lambda_bar, columns }, clipped)
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockDescriptor {
    pub row: usize,
    pub col: usize,
    pub label: &'static str,
    pub nnz: usize,
}

#[derive(Debug, Clone)]
pub struct KfeSystem {
    pub matrix: SparseMatrix,
    pub n: usize,
    pub blocks: Vec<BlockDescriptor>,
    pub normalization_row: usize,
    /// Largest absolute column sum before normalization.
    pub max_column_sum: f64,
}

/// Assemble from the converged HJB artifact (post-projection W coefficients).
pub fn assemble_kfe(hjb: &HjbSolution, cal: &Calibration, grid: &Grid) -> Result<KfeSystem, KfeError> {
    let gens = hjb.coeffs.map(|_, c| transpose_generator(c));
    let (transfer, _) = build_transfer(&hjb.region, cal, grid);
    assemble_from_parts(&gens, &transfer, &hjb.region, cal)
}

/// Block layout (rows = destination):
///
/// ```text
/// [ L_L^T - lLH I    lHL I_nosig                     lHL I         ]
/// [ lLH I            L_W^T - lHL I_nosig - lbar D    0             ]
/// [ 0                S                               L_H^T - lHL I ]
/// ```
pub fn assemble_from_parts(
    gens: &Triple<Tridiagonal>,
    transfer: &TransferMatrix,
    region: &SignalRegion,
    cal: &Calibration,
) -> Result<KfeSystem, KfeError> {
    let n = gens.l.len();
    let mut m = SparseMatrix::zeros(3 * n);
    let mut blocks = Vec::new();
    let off = |r: Regime| r.index() * n;
    let count = |m: &SparseMatrix| m.nnz();

    let put_gen = |m: &mut SparseMatrix, r: Regime, g: &Tridiagonal| {
        let o = off(r);
        for i in 0..n {
            m.add(o + i, o + i, g.diag[i]);
            if i > 0 {
                m.add(o + i, o + i - 1, g.lower[i]);
            }
            if i + 1 < n {
                m.add(o + i, o + i + 1, g.upper[i]);
            }
        }
    };

    let before = count(&m);
    put_gen(&mut m, Regime::L, &gens.l);
    for i in 0..n {
        m.add(i, i, -cal.lambda_lh);
    }
    blocks.push(BlockDescriptor { row: 1, col: 1, label: "L_L^T - lambda_LH I", nnz: count(&m) - before });

    let before = count(&m);
    for i in 0..n {
        if !region.flags[i] {
            m.add(i, off(Regime::W) + i, cal.lambda_hl);
        }
    }
    blocks.push(BlockDescriptor { row: 1, col: 2, label: "lambda_HL I_nosig", nnz: count(&m) - before });

    let before = count(&m);
    for i in 0..n {
        m.add(i, off(Regime::H) + i, cal.lambda_hl);
    }
    blocks.push(BlockDescriptor { row: 1, col: 3, label: "lambda_HL I", nnz: count(&m) - before });

    let before = count(&m);
    for i in 0..n {
        m.add(off(Regime::W) + i, i, cal.lambda_lh);
    }
    blocks.push(BlockDescriptor { row: 2, col: 1, label: "lambda_LH I", nnz: count(&m) - before });

    let before = count(&m);
    put_gen(&mut m, Regime::W, &gens.w);
    for i in 0..n {
        let loss = if region.flags[i] { transfer.lambda_bar } else { cal.lambda_hl };
        m.add(off(Regime::W) + i, off(Regime::W) + i, -loss);
    }
    blocks.push(BlockDescriptor {
        row: 2,
        col: 2,
        label: "L_W^T - lambda_HL I_nosig - lambda_bar diag(flags)",
        nnz: count(&m) - before,
    });

    let before = count(&m);
    for (r, c, v) in transfer.entries() {
        m.add(off(Regime::H) + r, off(Regime::W) + c, v);
    }
    blocks.push(BlockDescriptor { row: 3, col: 2, label: "S", nnz: count(&m) - before });

    let before = count(&m);
    put_gen(&mut m, Regime::H, &gens.h);
    for i in 0..n {
        m.add(off(Regime::H) + i, off(Regime::H) + i, -cal.lambda_hl);
    }
    blocks.push(BlockDescriptor { row: 3, col: 3, label: "L_H^T - lambda_HL I", nnz: count(&m) - before });

    let sums = m.column_sums();
    let (column, worst) =
        sums.iter().enumerate().fold((0, 0.0f64), |acc, (c, s)| if s.abs() > acc.1 { (c, s.abs()) } else { acc });
    if worst > 1e-8 {
        return Err(KfeError::Conservation { column, sum: sums[column] });
    }
    Ok(KfeSystem {
        matrix: m,
        n,
        blocks,
        normalization_row: cal.normalization_row.unwrap_or(3 * n - 1),
        max_column_sum: worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityTriple {
    pub g: Triple<Vec<f64>>,
    /// `|dk * sum(g) - 1|` of the raw solution.
    pub mass_error: f64,
    /// Largest negative entry magnitude before clipping.
    pub max_negativity: f64,
    /// Mass removed by clipping.
    pub clipped_mass: f64,
    /// `max |M g|` with the unmodified operator.
    pub flux_residual: f64,
}

impl DensityTriple {
    pub fn total(&self) -> Vec<f64> {
        (0..self.g.l.len()).map(|i| self.g.l[i] + self.g.w[i] + self.g.h[i]).collect()
    }

    pub fn shares(&self, grid: &Grid) -> Triple<f64> {
        self.g.map(|_, v| grid.dk * v.iter().sum::<f64>())
    }
}

const BORDER: usize = 7;

/// Replace the normalization row with `dk * 1` and solve by banded elimination
/// over node-interleaved unknowns.
pub fn solve_stationary(sys: &KfeSystem, grid: &Grid) -> Result<DensityTriple, KfeError> {
    let n = sys.n;
    let dim = 3 * n;
    let row = sys.normalization_row;
    let mut a = sys.matrix.clone();
    a.set_row(row, (0..dim).map(|j| (j, grid.dk)).collect());
    let mut perm: Vec<usize> = (0..n).flat_map(|i| (0..3).map(move |r| r * n + i)).filter(|&j| j != row).collect();
    perm.push(row);
    let pa = a.permuted(&perm);
    let mut b = vec![0.0; dim];
    b[dim - 1] = 1.0;
    let x = linalg::solve_bordered_band(&pa, &b, BORDER.min(dim))?;
    let mut g = vec![0.0; dim];
    for (new, &old) in perm.iter().enumerate() {
        g[old] = x[new];
    }

    let flux_residual = sys.matrix.matvec(&g).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let raw_mass: f64 = grid.dk * g.iter().sum::<f64>();
    let max_negativity = g.iter().fold(0.0f64, |m, &v| m.max(-v));
    let clipped_mass: f64 = grid.dk * g.iter().filter(|&&v| v < 0.0).map(|v| -v).sum::<f64>();
    if clipped_mass >= 1e-8 {
        return Err(KfeError::NegativeDensity { mass: clipped_mass });
    }
    for v in g.iter_mut() {
        *v = v.max(0.0);
    }
    let mass: f64 = grid.dk * g.iter().sum::<f64>();
    for v in g.iter_mut() {
        *v /= mass;
    }
    Ok(DensityTriple {
        g: Triple::new(g[..n].to_vec(), g[n..2 * n].to_vec(), g[2 * n..].to_vec()),
        mass_error: (raw_mass - 1.0).abs(),
        max_negativity,
        clipped_mass,
        flux_residual,
    })
}

/// Shares `(pi_L, pi_H)` when signaling is instantaneous.
pub fn limiting_shares(cal: &Calibration) -> Result<(f64, f64), KfeError> {
    let s = cal.lambda_lh + cal.lambda_hl;
    if s <= 0.0 {
        return Err(KfeError::NoSwitching);
    }
    Ok((cal.lambda_hl / s, cal.lambda_lh / s))
}

//! Tridiagonal and bordered-band direct solvers plus a small row-wise sparse matrix.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("M-matrix violated at row {row}: {reason}")]
    NotMMatrix { row: usize, reason: &'static str },
    #[error("singular system: pivot {pivot:e} at elimination step {step} (smallest/largest pivot ratio {ratio:e})")]
    Singular { step: usize, pivot: f64, ratio: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Tridiagonal system; `lower[i]` multiplies `x[i-1]`, `upper[i]` multiplies `x[i+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Positive diagonal, nonpositive off-diagonals, strict row dominance.
    pub fn audit_m_matrix(&self) -> Result<(), LinalgError> {
        let n = self.len();
        for i in 0..n {
            let lo = if i > 0 { self.lower[i] } else { 0.0 };
            let up = if i + 1 < n { self.upper[i] } else { 0.0 };
            if !(self.diag[i] > 0.0) {
                return Err(LinalgError::NotMMatrix { row: i, reason: "diagonal not positive" });
            }
            if lo > 0.0 || up > 0.0 {
                return Err(LinalgError::NotMMatrix { row: i, reason: "positive off-diagonal" });
            }
            if !(self.diag[i] > -lo - up) {
                return Err(LinalgError::NotMMatrix { row: i, reason: "not strictly diagonally dominant" });
            }
        }
        Ok(())
    }

    /// Thomas algorithm without pivoting.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.len();
        if rhs.len() != n || self.lower.len() != n || self.upper.len() != n {
            return Err(LinalgError::Dimension(format!("tridiagonal of size {n}")));
        }
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut piv = self.diag[0];
        if piv == 0.0 || !piv.is_finite() {
            return Err(LinalgError::Singular { step: 0, pivot: piv, ratio: 0.0 });
        }
        c[0] = if n > 1 { self.upper[0] / piv } else { 0.0 };
        d[0] = rhs[0] / piv;
        for i in 1..n {
            piv = self.diag[i] - self.lower[i] * c[i - 1];
            if piv == 0.0 || !piv.is_finite() {
                return Err(LinalgError::Singular { step: i, pivot: piv, ratio: 0.0 });
            }
            c[i] = if i + 1 < n { self.upper[i] / piv } else { 0.0 };
            d[i] = (rhs[i] - self.lower[i] * d[i - 1]) / piv;
        }
        for i in (0..n - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Ok(d)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * x[i];
                if i > 0 {
                    s += self.lower[i] * x[i - 1];
                }
                if i + 1 < n {
                    s += self.upper[i] * x[i + 1];
                }
                s
            })
            .collect()
    }
}

/// Square sparse matrix stored as sorted `(column, value)` lists per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, rows: vec![Vec::new(); n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Accumulate `value` into entry `(r, c)`; exact zeros are skipped.
    pub fn add(&mut self, r: usize, c: usize, value: f64) {
        if value == 0.0 {
            return;
        }
        let row = &mut self.rows[r];
        match row.binary_search_by_key(&c, |e| e.0) {
            Ok(p) => row[p].1 += value,
            Err(p) => row.insert(p, (c, value)),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let row = &self.rows[r];
        row.binary_search_by_key(&c, |e| e.0).map(|p| row[p].1).unwrap_or(0.0)
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn set_row(&mut self, r: usize, entries: Vec<(usize, f64)>) {
        let mut entries = entries;
        entries.sort_by_key(|e| e.0);
        self.rows[r] = entries;
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|row| row.iter().map(|&(c, v)| v * x[c]).sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for row in &self.rows {
            for &(c, v) in row {
                s[c] += v;
            }
        }
        s
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                d[r][c] = v;
            }
        }
        d
    }

    /// `P A P^T` where `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; self.n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let rows = perm
            .iter()
            .map(|&old| {
                let mut r: Vec<(usize, f64)> = self.rows[old].iter().map(|&(c, v)| (inv[c], v)).collect();
                r.sort_by_key(|e| e.0);
                r
            })
            .collect();
        Self { n: self.n, rows }
    }
}

/// Solve `A x = b` for a matrix that is banded except for its last `border`
/// rows and columns, which are handled densely with partial pivoting.
///
/// The leading block is eliminated without pivoting, which is stable for the
/// column diagonally dominant matrices produced by the forward equation.
pub fn solve_bordered_band(a: &SparseMatrix, b: &[f64], border: usize) -> Result<Vec<f64>, LinalgError> {
    let n = a.dim();
    if b.len() != n || border == 0 || border > n {
        return Err(LinalgError::Dimension(format!("n = {n}, rhs = {}, border = {border}", b.len())));
    }
    let m = n - border;

    let (mut p, mut q) = (0usize, 0usize);
    for i in 0..m {
        for &(j, _) in a.row(i) {
            if j < m {
                if j < i {
                    p = p.max(i - j);
                } else {
                    q = q.max(j - i);
                }
            }
        }
    }
    let width = p + q + 1;
    let mut band = vec![0.0; m * width];
    let mut tail = vec![0.0; m * border];
    let mut dense = vec![0.0; border * n];
    for i in 0..m {
        for &(j, v) in a.row(i) {
            if j < m {
                band[i * width + (j + p - i)] = v;
            } else {
                tail[i * border + (j - m)] = v;
            }
        }
    }
    for r in 0..border {
        for &(j, v) in a.row(m + r) {
            dense[r * n + j] = v;
        }
    }
    let mut rhs = b.to_vec();
    let scale = (0..n).flat_map(|i| a.row(i).iter().map(|e| e.1.abs())).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);

    let (mut pmin, mut pmax) = (f64::INFINITY, 0.0f64);
    for k in 0..m {
        let piv = band[k * width + p];
        pmin = pmin.min(piv.abs());
        pmax = pmax.max(piv.abs());
        if !(piv.abs() > 1e-14 * scale) {
            return Err(LinalgError::Singular { step: k, pivot: piv, ratio: pmin / pmax.max(f64::MIN_POSITIVE) });
        }
        let jend = (k + q).min(m - 1);
        for i in k + 1..=(k + p).min(m.saturating_sub(1)) {
            let f = band[i * width + (k + p - i)] / piv;
            if f == 0.0 {
                continue;
            }
            band[i * width + (k + p - i)] = 0.0;
            for j in k + 1..=jend {
                band[i * width + (j + p - i)] -= f * band[k * width + (j + p - k)];
            }
            for t in 0..border {
                tail[i * border + t] -= f * tail[k * border + t];
            }
            rhs[i] -= f * rhs[k];
        }
        for r in 0..border {
            let f = dense[r * n + k] / piv;
            if f == 0.0 {
                continue;
            }
            dense[r * n + k] = 0.0;
            for j in k + 1..=jend {
                dense[r * n + j] -= f * band[k * width + (j + p - k)];
            }
            for t in 0..border {
                dense[r * n + m + t] -= f * tail[k * border + t];
            }
            rhs[m + r] -= f * rhs[k];
        }
    }

    // dense Schur complement with partial pivoting
    let mut s: Vec<Vec<f64>> = (0..border).map(|r| dense[r * n + m..(r + 1) * n].to_vec()).collect();
    let mut y: Vec<f64> = rhs[m..].to_vec();
    for c in 0..border {
        let (pr, pv) =
            (c..border).map(|r| (r, s[r][c].abs())).fold((c, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        pmin = pmin.min(pv);
        pmax = pmax.max(pv);
        if !(pv > 1e-14 * scale) {
            return Err(LinalgError::Singular { step: m + c, pivot: pv, ratio: pmin / pmax.max(f64::MIN_POSITIVE) });
        }
        s.swap(c, pr);
        y.swap(c, pr);
        for r in c + 1..border {
            let f = s[r][c] / s[c][c];
            if f != 0.0 {
                for j in c..border {
                    s[r][j] -= f * s[c][j];
                }
                y[r] -= f * y[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..border).rev() {
        let mut acc = y[c];
        for j in c + 1..border {
            acc -= s[c][j] * x[m + j];
        }
        x[m + c] = acc / s[c][c];
    }
    for k in (0..m).rev() {
        let mut acc = rhs[k];
        for j in k + 1..=(k + q).min(m - 1) {
            acc -= band[k * width + (j + p - k)] * x[j];
        }
        for t in 0..border {
            acc -= tail[k * border + t] * x[m + t];
        }
        x[k] = acc / band[k * width + p];
    }
    Ok(x)
}

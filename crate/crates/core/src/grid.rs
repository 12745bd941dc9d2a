//! Uniform capital grid, regime labels and per-regime containers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("interpolation query is NaN")]
    NanQuery,
    #[error("value vector has length {got}, grid has {expected} nodes")]
    Length { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    L,
    W,
    H,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::L, Regime::W, Regime::H];

    pub fn index(self) -> usize {
        match self {
            Regime::L => 0,
            Regime::W => 1,
            Regime::H => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Regime::L => "L",
            Regime::W => "W",
            Regime::H => "H",
        }
    }
}

/// One value per regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple<T> {
    pub l: T,
    pub w: T,
    pub h: T,
}

impl<T> Triple<T> {
    pub fn new(l: T, w: T, h: T) -> Self {
        Self { l, w, h }
    }

    pub fn get(&self, r: Regime) -> &T {
        match r {
            Regime::L => &self.l,
            Regime::W => &self.w,
            Regime::H => &self.h,
        }
    }

    pub fn get_mut(&mut self, r: Regime) -> &mut T {
        match r {
            Regime::L => &mut self.l,
            Regime::W => &mut self.w,
            Regime::H => &mut self.h,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Regime, &T) -> U) -> Triple<U> {
        Triple { l: f(Regime::L, &self.l), w: f(Regime::W, &self.w), h: f(Regime::H, &self.h) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub nodes: Vec<f64>,
    pub dk: f64,
}

/// Position of a query inside the grid: `k = k_l + omega * dk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub lower: usize,
    pub omega: f64,
    /// Query fell outside `[k_1, k_N]` and was clamped.
    pub clipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interpolated {
    pub value: f64,
    pub clipped: bool,
}

impl Grid {
    pub fn new(k_min: f64, k_max: f64, n: usize) -> Self {
        assert!(n >= 2 && k_max > k_min, "degenerate grid");
        let dk = (k_max - k_min) / (n - 1) as f64;
        let nodes = (0..n).map(|i| k_min + i as f64 * dk).collect();
        Self { nodes, dk }
    }

    pub fn from_calibration(cal: &crate::Calibration) -> Self {
        Self::new(cal.k_min, cal.k_max, cal.n)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn k_min(&self) -> f64 {
        self.nodes[0]
    }

    pub fn k_max(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn locate(&self, k: f64) -> Location {
        let n = self.len();
        if k <= self.k_min() {
            return Location { lower: 0, omega: 0.0, clipped: k < self.k_min() };
        }
        if k >= self.k_max() {
            return Location { lower: n - 2, omega: 1.0, clipped: k > self.k_max() };
        }
        let s = (k - self.k_min()) / self.dk;
        let mut l = (s.floor() as usize).min(n - 2);
        let mut omega = s - l as f64;
        // snap roundoff so on-node queries carry zero weight on the upper node
        if omega > 1.0 - 1e-9 {
            l = (l + 1).min(n - 2);
            omega = if l + 1 == n - 1 && s >= (n - 1) as f64 - 1e-9 { 1.0 } else { 0.0 };
        } else if omega < 1e-9 {
            omega = 0.0;
        }
        Location { lower: l, omega, clipped: false }
    }

    /// Piecewise-linear interpolation with constant extrapolation.
    pub fn interp(&self, values: &[f64], k: f64) -> f64 {
        let loc = self.locate(k);
        let a = values[loc.lower];
        if loc.omega == 0.0 {
            a
        } else {
            a + loc.omega * (values[loc.lower + 1] - a)
        }
    }
}

/// Checked interpolation: NaN queries are fatal, out-of-range queries clip.
pub fn interp_linear(values: &[f64], k: f64, grid: &Grid) -> Result<Interpolated, GridError> {
    if k.is_nan() {
        return Err(GridError::NanQuery);
    }
    if values.len() != grid.len() {
        return Err(GridError::Length { got: values.len(), expected: grid.len() });
    }
    let clipped = grid.locate(k).clipped;
    Ok(Interpolated { value: grid.interp(values, k), clipped })
}

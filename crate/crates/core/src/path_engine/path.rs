use serde::{Deserialize, Serialize};

use super::grid::TimeGrid;
use super::rng::{standard_normal, RngStream};
use crate::error::{Error, Result};

/// A discretized `dim`-dimensional trajectory on a [`TimeGrid`].
///
/// `values` is row-major with `n_steps + 1` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    pub grid: TimeGrid,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl SamplePath {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![0.0; (grid.n_steps() + 1) * dim],
        }
    }

    /// Cumulates per-step increments (`n_steps * dim`) from `start`.
    pub fn from_increments(grid: TimeGrid, start: &[f64], increments: &[f64]) -> Self {
        let dim = start.len();
        let n = grid.n_steps();
        debug_assert_eq!(increments.len(), n * dim);
        let mut values = Vec::with_capacity((n + 1) * dim);
        values.extend_from_slice(start);
        for k in 0..n {
            for i in 0..dim {
                let prev = values[k * dim + i];
                values.push(prev + increments[k * dim + i]);
            }
        }
        Self { grid, dim, values }
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.row(self.grid.n_steps())
    }

    /// Increment `values[k+1] - values[k]` written into `out`.
    #[inline]
    pub fn increment_into(&self, k: usize, out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = self.values[(k + 1) * d + i] - self.values[k * d + i];
        }
    }

    pub fn increments(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_steps() * self.dim];
        for k in 0..self.grid.n_steps() {
            let (lo, hi) = (k * self.dim, (k + 1) * self.dim);
            self.increment_into(k, &mut out[lo..hi]);
        }
        out
    }

    /// Largest absolute coordinate difference over nodes `0..=last`.
    pub fn sup_distance_until(&self, other: &SamplePath, last: usize) -> f64 {
        let end = (last + 1) * self.dim;
        self.values[..end]
            .iter()
            .zip(&other.values[..end])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sup_distance(&self, other: &SamplePath) -> f64 {
        self.sup_distance_until(other, self.grid.n_steps())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Cameron–Martin element stored through its piecewise-constant density:
/// `dot[k]` is the drift density on `[t_k, t_{k+1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameronMartinPath {
    pub grid: TimeGrid,
    pub dim: usize,
    pub dot: Vec<f64>,
}

/// Which half of the `π_τ` split to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    /// `π_τ u`: steps before `tau_index` kept.
    BeforeTau,
    /// `(I - π_τ) u`: steps from `tau_index` on kept.
    AfterTau,
}

impl CameronMartinPath {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            dot: vec![0.0; grid.n_steps() * dim],
        }
    }

    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        let dot = value
            .iter()
            .copied()
            .cycle()
            .take(grid.n_steps() * value.len())
            .collect();
        Self {
            grid,
            dim: value.len(),
            dot,
        }
    }

    pub fn from_dot(grid: TimeGrid, dim: usize, dot: Vec<f64>) -> Result<Self> {
        if dot.len() != grid.n_steps() * dim {
            return Err(Error::Mismatch {
                what: "drift density length",
                expected: grid.n_steps() * dim,
                found: dot.len(),
            });
        }
        Ok(Self { grid, dim, dot })
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.dot[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.dot[k * self.dim..(k + 1) * self.dim]
    }

    /// The path `u(t_k) = Σ_{j<k} dot[j] dt`.
    pub fn integrate(&self) -> SamplePath {
        let dt = self.grid.dt();
        let incs: Vec<f64> = self.dot.iter().map(|d| d * dt).collect();
        SamplePath::from_increments(self.grid, &vec![0.0; self.dim], &incs)
    }

    pub fn is_zero_before(&self, tau_index: usize) -> bool {
        self.dot[..tau_index.min(self.grid.n_steps()) * self.dim]
            .iter()
            .all(|&v| v == 0.0)
    }

    pub fn add(&self, other: &CameronMartinPath) -> Result<CameronMartinPath> {
        check_same(self.grid, self.dim, other.grid, other.dim)?;
        let dot = self.dot.iter().zip(&other.dot).map(|(a, b)| a + b).collect();
        Ok(CameronMartinPath {
            grid: self.grid,
            dim: self.dim,
            dot,
        })
    }
}

fn check_same(ga: TimeGrid, da: usize, gb: TimeGrid, db: usize) -> Result<()> {
    if ga.n_steps() != gb.n_steps() {
        return Err(Error::Mismatch {
            what: "grid steps",
            expected: ga.n_steps(),
            found: gb.n_steps(),
        });
    }
    if da != db {
        return Err(Error::Mismatch {
            what: "dimension",
            expected: da,
            found: db,
        });
    }
    Ok(())
}

/// Draws `n_steps * dim` independent `N(0, dt)` increments from `rng`.
pub fn draw_increments<R: rand::Rng + ?Sized>(rng: &mut R, grid: TimeGrid, dim: usize) -> Vec<f64> {
    let sd = grid.dt().sqrt();
    (0..grid.n_steps() * dim)
        .map(|_| sd * standard_normal(rng))
        .collect()
}

/// Brownian motion started at the origin.
pub fn sample_brownian(rng: &RngStream, grid: TimeGrid, dim: usize) -> SamplePath {
    let incs = draw_increments(&mut rng.rng(), grid, dim);
    SamplePath::from_increments(grid, &vec![0.0; dim], &incs)
}

/// Left-point Itô sum `Σ_k dot_v[k] · (driver[k+1] - driver[k])`.
pub fn ito_integral(dot_v: &CameronMartinPath, driver: &SamplePath) -> Result<f64> {
    check_same(dot_v.grid, dot_v.dim, driver.grid, driver.dim)?;
    let d = driver.dim;
    let mut acc = 0.0;
    for k in 0..dot_v.grid.n_steps() {
        for i in 0..d {
            let inc = driver.values[(k + 1) * d + i] - driver.values[k * d + i];
            acc += dot_v.dot[k * d + i] * inc;
        }
    }
    Ok(acc)
}

/// `|u|_H^2 = Σ_k |dot[k]|^2 dt`.
pub fn cm_norm_sq(u: &CameronMartinPath) -> f64 {
    u.dot.iter().map(|v| v * v).sum::<f64>() * u.grid.dt()
}

/// `(I - π_τ) u` (or `π_τ u` with [`Projection::BeforeTau`]).
///
/// Step `k` covers `[t_k, t_{k+1})`; the step starting at `tau_index`
/// belongs to the post-τ part.
pub fn pi_tau(u: &CameronMartinPath, tau_index: usize, keep: Projection) -> Result<CameronMartinPath> {
    let n = u.grid.n_steps();
    if tau_index > n {
        return Err(Error::IndexOutOfRange {
            index: tau_index,
            max: n,
        });
    }
    let mut out = u.clone();
    let split = tau_index * u.dim;
    match keep {
        Projection::AfterTau => out.dot[..split].iter_mut().for_each(|v| *v = 0.0),
        Projection::BeforeTau => out.dot[split..].iter_mut().for_each(|v| *v = 0.0),
    }
    Ok(out)
}

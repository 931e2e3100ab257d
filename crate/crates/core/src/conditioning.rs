//! Stopping rules and conditional expectations given `F_τ`.
//!
//! `F_τ` is realized through the Markov state at the stopping time: samples
//! are grouped by the first coordinate of `W(t_τ)` (equiprobable bins), fitted
//! by ridge regression on its powers, or re-simulated from the stopped state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ShiftedPair};
use crate::path_engine::{SamplePath, StreamBlock};
use crate::policy::{DriftPolicy, StepContext};
use crate::stats::{mean, mean_se, try_par_map, Estimate};

/// Minimum sample count for a bin to be trusted.
pub const MIN_BIN_COUNT: usize = 30;

/// A stopping time evaluated on grid nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StoppingRule {
    Deterministic { t: f64 },
    /// First node where `|W| >= radius` (capped at the horizon).
    FirstExit { radius: f64 },
    /// First node where the density process reaches `level` (capped at the horizon).
    FirstLevelHit { level: f64 },
}

impl StoppingRule {
    /// `τ ≡ 0`: `F_τ` is trivial.
    pub fn degenerate() -> Self {
        StoppingRule::Deterministic { t: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StoppingRule::Deterministic { t } if !(0.0..=1.0).contains(t) => Err(Error::InvalidArgument(
                format!("deterministic stopping time {t} outside [0, 1]"),
            )),
            StoppingRule::FirstExit { radius } if !(*radius > 0.0) => {
                Err(Error::InvalidArgument("exit radius must be positive".into()))
            }
            StoppingRule::FirstLevelHit { level } if !(*level > 0.0) => {
                Err(Error::InvalidArgument("level must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, StoppingRule::Deterministic { t } if *t <= 0.0)
    }

    fn hits(&self, t_k: f64, state: &[f64], log_m: Option<f64>, grid_t: f64) -> bool {
        match self {
            StoppingRule::Deterministic { .. } => t_k >= grid_t,
            StoppingRule::FirstExit { radius } => {
                state.iter().map(|x| x * x).sum::<f64>().sqrt() >= *radius
            }
            StoppingRule::FirstLevelHit { level } => log_m.is_some_and(|l| l >= level.ln()),
        }
    }

    /// Stopping decision at node `ctx.k`, from information up to `t_k`.
    pub fn triggered(&self, ctx: &StepContext<'_>) -> bool {
        let t_tau = self.deterministic_time(ctx.grid);
        self.hits(ctx.t(), ctx.state(), Some(ctx.log_density), t_tau)
    }

    fn deterministic_time(&self, grid: &crate::path_engine::TimeGrid) -> f64 {
        match self {
            StoppingRule::Deterministic { t } => grid.t(grid.index_at_or_after(*t)),
            _ => f64::INFINITY,
        }
    }

    /// First node satisfying the rule, else `n_steps`. `log_m` holds the
    /// density process `log M(t_k)` needed by [`StoppingRule::FirstLevelHit`].
    pub fn evaluate(&self, path: &SamplePath, log_m: Option<&[f64]>) -> Result<usize> {
        let grid = path.grid;
        let n = grid.n_steps();
        if let StoppingRule::Deterministic { t } = self {
            return Ok(grid.index_at_or_after(*t));
        }
        if let (StoppingRule::FirstLevelHit { .. }, None) = (self, log_m) {
            return Err(Error::Precondition("level stopping needs a density process".into()));
        }
        if let Some(l) = log_m {
            if l.len() != n + 1 {
                return Err(Error::Mismatch {
                    what: "density process length",
                    expected: n + 1,
                    found: l.len(),
                });
            }
        }
        let t_tau = self.deterministic_time(&grid);
        Ok((0..=n)
            .find(|&k| self.hits(grid.t(k), path.row(k), log_m.map(|l| l[k]), t_tau))
            .unwrap_or(n))
    }
}

/// How a conditional expectation is estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditioningScheme {
    Binning { bins: usize },
    Regression { degree: usize, ridge: f64 },
    NestedMc { states: usize, branches: usize },
}

/// Equiprobable bins of a scalar statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Interior edges, increasing; cell `j` is `[edges[j-1], edges[j])`.
    pub edges: Vec<f64>,
}

impl Partition {
    pub fn single() -> Self {
        Self { edges: Vec::new() }
    }

    /// Empirical-quantile edges; collapses to fewer cells if the statistic
    /// has ties (in particular to one cell when it is constant).
    pub fn quantiles(xs: &[f64], n_bins: usize) -> Self {
        if xs.is_empty() || n_bins <= 1 {
            return Self::single();
        }
        let mut s: Vec<f64> = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let mut edges: Vec<f64> = Vec::with_capacity(n_bins - 1);
        for j in 1..n_bins {
            let e = s[j * s.len() / n_bins];
            if e > s[0] && edges.last().is_none_or(|l| e > *l) {
                edges.push(e);
            }
        }
        Self { edges }
    }

    pub fn n_cells(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn assign(&self, x: f64) -> usize {
        self.edges.partition_point(|e| *e <= x)
    }

    /// Sample indices per cell.
    pub fn group(&self, xs: &[f64]) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.n_cells()];
        for (i, &x) in xs.iter().enumerate() {
            g[self.assign(x)].push(i);
        }
        g
    }
}

/// One row of a per-cell table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub estimate: f64,
    pub se: f64,
    /// Underfilled or undefined cell, excluded from worst-case summaries.
    pub flagged: bool,
}

impl Cell {
    pub fn as_estimate(&self) -> Estimate {
        Estimate {
            mean: self.estimate,
            se: self.se,
        }
    }
}

pub fn cell_range(xs: &[f64], idx: &[usize]) -> (f64, f64) {
    idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
        (lo.min(xs[i]), hi.max(xs[i]))
    })
}

/// Binned conditional means `E[value | state ∈ cell]`.
pub fn binned_means(states: &[f64], values: &[f64], partition: &Partition) -> Result<Vec<Cell>> {
    check_len(states, values)?;
    Ok(partition
        .group(states)
        .iter()
        .map(|idx| {
            let v: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
            let e = mean_se(&v);
            let (lo, hi) = cell_range(states, idx);
            Cell {
                lo,
                hi,
                count: idx.len(),
                estimate: e.mean,
                se: if idx.len() < 2 { f64::NAN } else { e.se },
                flagged: idx.len() < MIN_BIN_COUNT,
            }
        })
        .collect())
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Mismatch {
            what: "sample count",
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

/// Ridge least squares of `value` on `1, x, …, x^degree`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub coef: Vec<f64>,
    pub ridge: f64,
    /// Standard deviation of the residuals.
    pub residual_sd: f64,
    /// Ridge was raised because the normal equations were singular.
    pub ridge_raised: bool,
}

impl RegressionFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

pub fn regress(states: &[f64], values: &[f64], degree: usize, ridge: f64) -> Result<RegressionFit> {
    check_len(states, values)?;
    let p = degree + 1;
    if states.len() < p {
        return Err(Error::Precondition("fewer samples than regression features".into()));
    }
    // Centre and scale the state so powers stay well conditioned.
    let m = mean(states);
    let sd = (states.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / states.len() as f64)
        .sqrt()
        .max(1e-12);
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut phi = vec![0.0; p];
    for (&x, &y) in states.iter().zip(values) {
        let z = (x - m) / sd;
        phi[0] = 1.0;
        for j in 1..p {
            phi[j] = phi[j - 1] * z;
        }
        for a in 0..p {
            xty[a] += phi[a] * y;
            for b in 0..p {
                xtx[a * p + b] += phi[a] * phi[b];
            }
        }
    }
    let n = states.len() as f64;
    let mut lam = ridge.max(0.0);
    let mut raised = false;
    let beta = loop {
        let mut a = xtx.clone();
        for j in 0..p {
            a[j * p + j] += lam * n;
        }
        match cholesky_solve(&a, &xty, p) {
            Some(b) => break b,
            None => {
                lam = if lam == 0.0 { 1e-10 } else { lam * 10.0 };
                raised = true;
                if lam > 1e6 {
                    return Err(Error::Numerical("regression stayed singular".into()));
                }
            }
        }
    };
    // Back to powers of the raw state: Σ β_j ((x - m)/sd)^j.
    let mut coef = vec![0.0; p];
    for (j, bj) in beta.iter().enumerate() {
        let scale = bj / sd.powi(j as i32);
        for (r, c) in coef.iter_mut().enumerate().take(j + 1) {
            *c += scale * binom(j, r) * (-m).powi((j - r) as i32);
        }
    }
    let fit = RegressionFit {
        coef,
        ridge: lam,
        residual_sd: 0.0,
        ridge_raised: raised,
    };
    let res: Vec<f64> = states
        .iter()
        .zip(values)
        .map(|(x, y)| y - fit.predict(*x))
        .collect();
    let rm = mean(&res);
    let rsd = (res.iter().map(|r| (r - rm) * (r - rm)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    Ok(RegressionFit {
        residual_sd: rsd,
        ..fit
    })
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub(crate) fn cholesky_solve(a: &[f64], b: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if !(s > 1e-12 * a[i * p + i].abs().max(1e-300)) {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    let mut y = vec![0.0; p];
    for i in 0..p {
        let s: f64 = (0..i).map(|k| l[i * p + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|k| l[k * p + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * p + i];
    }
    Some(x)
}

/// `E_θ[f | cell] = E_ν[f L | cell] / E_ν[L | cell]` with a delta-method error.
/// Cells whose denominator is within 5 SE of zero are flagged.
pub fn bayes_conditional(states: &[f64], f: &[f64], l: &[f64], partition: &Partition) -> Result<Vec<Cell>> {
    check_len(states, f)?;
    check_len(states, l)?;
    if l.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Precondition("density samples must be nonnegative".into()));
    }
    Ok(partition
        .group(states)
        .iter()
        .map(|idx| {
            let (lo, hi) = cell_range(states, idx);
            let ls: Vec<f64> = idx.iter().map(|&i| l[i]).collect();
            let fl: Vec<f64> = idx.iter().map(|&i| f[i] * l[i]).collect();
            let den = mean_se(&ls);
            let num = mean(&fl);
            let r = num / den.mean;
            let infl: Vec<f64> = idx.iter().map(|&i| (f[i] - r) * l[i] / den.mean).collect();
            let se = mean_se(&infl).se;
            let undefined = !(den.mean > 5.0 * den.se) && den.se > 0.0 || den.mean <= 0.0;
            Cell {
                lo,
                hi,
                count: idx.len(),
                estimate: r,
                se,
                flagged: undefined || idx.len() < MIN_BIN_COUNT,
            }
        })
        .collect())
}

/// The conditioning statistic: first coordinate of `W(t_τ)`, plus the index.
pub fn stopped_state(tau: &StoppingRule, pair: &ShiftedPair) -> Result<(usize, f64)> {
    let lm = match tau {
        StoppingRule::FirstLevelHit { .. } => Some(pair.log_wick_process()),
        _ => None,
    };
    let k = tau.evaluate(&pair.w_path, lm.as_deref())?;
    Ok((k, pair.w_path.row(k)[0]))
}

/// Nested Monte Carlo: for each of `states` outer paths, stop at `τ` and
/// re-simulate `branches` continuations under `policy`; returns one cell per
/// outer path with `value` averaged over its continuations.
pub fn nested_conditional<F>(
    model: &Model,
    grid: crate::path_engine::TimeGrid,
    tau: &StoppingRule,
    policy: &DriftPolicy,
    block: StreamBlock,
    states: usize,
    branches: usize,
    value: F,
) -> Result<Vec<(f64, Vec<f64>)>>
where
    F: Fn(&ShiftedPair) -> f64 + Sync + Send,
{
    let outer = block.purpose(0);
    let inner = block.purpose(1);
    try_par_map(states, |i| {
        let base = model.sample_base(&outer.stream(i), grid)?;
        let (k, x) = stopped_state(tau, &base)?;
        let sub = StreamBlock::new(inner.seed, inner.base + (i as u64) * branches as u64);
        let vals = (0..branches)
            .map(|b| {
                let cont = model.continue_from(&base, k, &sub.stream(b), policy)?;
                Ok(value(&cont))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((x, vals))
    })
}

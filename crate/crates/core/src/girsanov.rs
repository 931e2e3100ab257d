//! Wick exponentials, Girsanov densities and relative entropy of shifts.
//!
//! For an invertible shift, `log L∘W^u = -log ρ(-δ_β u)`, so the relative
//! entropy `E[L log L]` is the mean of `-log_wick` under the base measure.

use serde::{Deserialize, Serialize};

use crate::conditioning::{cell_range, stopped_state, Partition, StoppingRule, MIN_BIN_COUNT};
use crate::error::{Error, Result};
use crate::models::{realize_on_path, Model, ShiftedPair};
use crate::path_engine::{CameronMartinPath, SamplePath, StreamBlock, TimeGrid};
use crate::policy::{DriftPolicy, Invertibility};
use crate::stats::{batch_means, mean_se, try_par_map, Estimate, DEFAULT_BATCHES};

/// `log M(t_k)` of the running Wick exponential `M(s) = ρ(-δ_β π_s v)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityProcess {
    pub grid: TimeGrid,
    pub log_m: Vec<f64>,
}

impl DensityProcess {
    pub fn terminal(&self) -> f64 {
        self.log_m[self.grid.n_steps()]
    }
}

pub fn wick(v: &CameronMartinPath, beta: &SamplePath) -> Result<DensityProcess> {
    if v.grid != beta.grid || v.dim != beta.dim {
        return Err(Error::Mismatch {
            what: "wick grid/dimension",
            expected: v.grid.n_steps() * v.dim,
            found: beta.grid.n_steps() * beta.dim,
        });
    }
    let d = v.dim;
    let dt = v.grid.dt();
    let mut log_m = Vec::with_capacity(v.grid.n_steps() + 1);
    let mut acc = 0.0;
    log_m.push(acc);
    for k in 0..v.grid.n_steps() {
        for i in 0..d {
            let x = v.dot[k * d + i];
            let db = beta.values[(k + 1) * d + i] - beta.values[k * d + i];
            acc += -x * db - 0.5 * x * x * dt;
        }
        log_m.push(acc);
    }
    Ok(DensityProcess {
        grid: v.grid,
        log_m,
    })
}

/// `log L∘W^u`, labelled by whether the shift is known to be invertible.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftLogDensity {
    pub value: f64,
    /// `false`: only an upper-bound surrogate for the entropy integrand.
    pub certified: bool,
}

pub fn log_density_at_shift(pair: &ShiftedPair, class: Invertibility) -> ShiftLogDensity {
    ShiftLogDensity {
        value: -pair.log_wick,
        certified: class != Invertibility::Uncertified,
    }
}

/// Per-cell entropy comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyCell {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub entropy: f64,
    pub half_energy: f64,
    pub gap: f64,
    /// Standard error of the paired gap.
    pub se: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub entropy_est: Estimate,
    pub half_energy: Estimate,
    /// `half_energy - entropy_est`, paired.
    pub gap: Estimate,
    pub certified: bool,
    pub cells: Vec<EntropyCell>,
    /// Most negative `gap / se` over unflagged cells (0 when unconditional).
    pub worst_cell_z: f64,
    pub mean_cell_gap: f64,
}

impl EntropyReport {
    /// Entropy inequality `gap >= -k SE`, overall and in every valid cell.
    pub fn inequality_holds(&self, k: f64) -> bool {
        self.gap.mean >= -k * self.gap.se && self.worst_cell_z >= -k
    }

    /// Equality `|gap| <= k SE`, overall and in every valid cell.
    pub fn equality_holds(&self, k: f64) -> bool {
        self.gap.within(0.0, k, 1e-12)
            && self
                .cells
                .iter()
                .filter(|c| !c.flagged)
                .all(|c| c.gap.abs() <= k * c.se + 1e-12)
    }
}

/// Relative entropy of `W^u ν` against `ν`, unconditional or per `F_τ` cell.
#[allow(clippy::too_many_arguments)]
pub fn relative_entropy(
    model: &Model,
    policy: &DriftPolicy,
    tau: &StoppingRule,
    bins: usize,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<EntropyReport> {
    policy.validate(&grid, model.dim())?;
    tau.validate()?;
    let class = policy.invertibility();
    let rows = try_par_map(n_paths, |i| {
        let pair = model.apply_shift(&block.stream(i), grid, policy)?;
        let (k, x) = stopped_state(tau, &pair)?;
        if !tau.is_degenerate() && !pair.u.is_zero_before(k) {
            return Err(Error::Precondition(
                "drift must vanish before the stopping time".into(),
            ));
        }
        let ld = log_density_at_shift(&pair, class);
        Ok((x, ld.value, pair.half_energy()))
    })?;
    let states: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let ent: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let half: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let gap: Vec<f64> = half.iter().zip(&ent).map(|(h, e)| h - e).collect();

    let partition = if tau.is_degenerate() {
        Partition::single()
    } else {
        Partition::quantiles(&states, bins)
    };
    let cells: Vec<EntropyCell> = if partition.n_cells() == 1 {
        Vec::new()
    } else {
        partition
            .group(&states)
            .iter()
            .map(|idx| {
                let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
                let g = mean_se(&pick(&gap));
                let (lo, hi) = cell_range(&states, idx);
                EntropyCell {
                    lo,
                    hi,
                    count: idx.len(),
                    entropy: mean_se(&pick(&ent)).mean,
                    half_energy: mean_se(&pick(&half)).mean,
                    gap: g.mean,
                    se: g.se,
                    flagged: idx.len() < MIN_BIN_COUNT,
                }
            })
            .collect()
    };
    let valid: Vec<&EntropyCell> = cells.iter().filter(|c| !c.flagged).collect();
    let worst_cell_z = valid
        .iter()
        .map(|c| if c.se > 0.0 { c.gap / c.se } else if c.gap < 0.0 { f64::NEG_INFINITY } else { 0.0 })
        .fold(0.0, f64::min);
    let mean_cell_gap = if valid.is_empty() {
        0.0
    } else {
        valid.iter().map(|c| c.gap).sum::<f64>() / valid.len() as f64
    };
    Ok(EntropyReport {
        entropy_est: batch_means(&ent, DEFAULT_BATCHES),
        half_energy: batch_means(&half, DEFAULT_BATCHES),
        gap: batch_means(&gap, DEFAULT_BATCHES),
        certified: class != Invertibility::Uncertified,
        cells,
        worst_cell_z,
        mean_cell_gap,
    })
}

/// `M(1) = ρ(-δ_β v)` for `v` evaluated open-loop on base paths, together
/// with the conditioning state of each path.
pub fn base_densities(
    model: &Model,
    v: &DriftPolicy,
    tau: &StoppingRule,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<Vec<(f64, f64, bool)>> {
    v.validate(&grid, model.dim())?;
    try_par_map(n_paths, |i| {
        let base = model.sample_base(&block.stream(i), grid)?;
        let dot = realize_on_path(v, &base.w_path, &base.beta_path)?;
        let m = wick(&dot, &base.beta_path)?;
        let (k, x) = stopped_state(tau, &base)?;
        Ok((x, m.terminal().exp(), dot.is_zero_before(k)))
    })
}

/// Outcome of the unit conditional-expectation criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitConditionalReport {
    pub cells: Vec<crate::conditioning::Cell>,
    /// Largest `|E[M(1)|cell] - 1| / se` over valid cells.
    pub max_abs_z: f64,
    /// `π_τ v = 0` held on every sampled path.
    pub vanishes_before_tau: bool,
    pub passes: bool,
}

/// `E[M(1) | F_τ] = 1` per cell, within `k` standard errors.
#[allow(clippy::too_many_arguments)]
pub fn check_unit_conditional(
    model: &Model,
    v: &DriftPolicy,
    tau: &StoppingRule,
    bins: usize,
    k: f64,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<UnitConditionalReport> {
    let rows = base_densities(model, v, tau, grid, block, n_paths)?;
    let states: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let l: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let partition = if tau.is_degenerate() {
        Partition::single()
    } else {
        Partition::quantiles(&states, bins)
    };
    let cells = crate::conditioning::binned_means(&states, &l, &partition)?;
    let max_abs_z = cells
        .iter()
        .filter(|c| !c.flagged)
        .map(|c| {
            let z = c.as_estimate().z_score(1.0).abs();
            if z.is_nan() { 0.0 } else { z }
        })
        .fold(0.0, f64::max);
    Ok(UnitConditionalReport {
        vanishes_before_tau: rows.iter().all(|r| r.2),
        passes: max_abs_z <= k,
        max_abs_z,
        cells,
    })
}

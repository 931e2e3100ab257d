//! The conditional variational representation
//! `-log E[e^{-f} | F_τ] = inf_u E[f∘W^u + ½|u|_H^2 | F_τ]`:
//! direct value, control objective, duality gap and the entropy-form dual.

mod optimize;

use serde::{Deserialize, Serialize};

pub use optimize::{
    finite_difference_gradient, optimize, pathwise_gradient, OptimizeResult, OptimizerConfig, PolicyTemplate,
    TraceRow,
};

use crate::conditioning::{cell_range, stopped_state, Cell, Partition, StoppingRule, MIN_BIN_COUNT};
use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::girsanov::wick;
use crate::models::{realize_on_path, Model};
use crate::path_engine::{StreamBlock, TimeGrid};
use crate::policy::DriftPolicy;
use crate::stats::{batch_means, mean, mean_se, neg_log_mean_exp, try_par_map, Estimate, DEFAULT_BATCHES};

/// A scalar quantity overall and per `F_τ` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub overall: Estimate,
    pub cells: Vec<Cell>,
}

fn partition_for(tau: &StoppingRule, states: &[f64], bins: usize) -> Partition {
    if tau.is_degenerate() {
        Partition::single()
    } else {
        Partition::quantiles(states, bins)
    }
}

fn neg_log_cells(states: &[f64], f: &[f64], partition: &Partition) -> Vec<Cell> {
    partition
        .group(states)
        .iter()
        .map(|idx| {
            let v: Vec<f64> = idx.iter().map(|&i| f[i]).collect();
            let (e, _) = neg_log_mean_exp(&v);
            let (lo, hi) = cell_range(states, idx);
            Cell {
                lo,
                hi,
                count: idx.len(),
                estimate: e.mean,
                se: e.se,
                flagged: idx.len() < MIN_BIN_COUNT || !e.se.is_finite(),
            }
        })
        .collect()
}

/// Samples `(state at τ, f(W))` under the base measure.
pub fn base_samples(
    model: &Model,
    f: &Functional,
    tau: &StoppingRule,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    f.validate(model.dim())?;
    let rows = try_par_map(n_paths, |i| {
        let p = model.sample_base(&block.stream(i), grid)?;
        let (_, x) = stopped_state(tau, &p)?;
        Ok((x, f.value(&p.w_path)))
    })?;
    Ok(rows.into_iter().unzip())
}

/// `-log E[e^{-f} | F_τ]` per cell (a single overall value when `τ` is degenerate).
pub fn direct_value(
    model: &Model,
    f: &Functional,
    tau: &StoppingRule,
    bins: usize,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<ValueTable> {
    let (states, fv) = base_samples(model, f, tau, grid, block, n_paths)?;
    if fv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("objective not finite on a sampled path".into()));
    }
    let (mut overall, infl) = neg_log_mean_exp(&fv);
    overall.se = batch_means(&infl, DEFAULT_BATCHES).se;
    let partition = partition_for(tau, &states, bins);
    let cells = if partition.n_cells() > 1 {
        neg_log_cells(&states, &fv, &partition)
    } else {
        Vec::new()
    };
    Ok(ValueTable { overall, cells })
}

/// Per-path samples `(state, f(W^u) + ½|u|_H^2)` under a shift.
pub fn objective_samples(
    model: &Model,
    f: &Functional,
    policy: &DriftPolicy,
    tau: &StoppingRule,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    f.validate(model.dim())?;
    policy.validate(&grid, model.dim())?;
    let rows = try_par_map(n_paths, |i| {
        let p = model.apply_shift(&block.stream(i), grid, policy)?;
        let (k, x) = stopped_state(tau, &p)?;
        if !tau.is_degenerate() && !p.u.is_zero_before(k) {
            return Err(Error::Precondition("drift must vanish before the stopping time".into()));
        }
        Ok((x, f.value(&p.w_path) + p.half_energy()))
    })?;
    Ok(rows.into_iter().unzip())
}

/// `J(u) = E[f∘W^u + ½|u|_H^2 | F_τ]`.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    model: &Model,
    f: &Functional,
    policy: &DriftPolicy,
    tau: &StoppingRule,
    bins: usize,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<ValueTable> {
    let (states, cost) = objective_samples(model, f, policy, tau, grid, block, n_paths)?;
    let partition = partition_for(tau, &states, bins);
    let cells = if partition.n_cells() > 1 {
        crate::conditioning::binned_means(&states, &cost, &partition)?
    } else {
        Vec::new()
    };
    Ok(ValueTable {
        overall: batch_means(&cost, DEFAULT_BATCHES),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCell {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub objective: f64,
    pub direct: f64,
    pub gap: f64,
    pub se: f64,
    pub flagged: bool,
}

/// `J(u) - (-log E[e^{-f}|F_τ])`, paired on common random numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub objective: Estimate,
    pub direct: Estimate,
    pub gap: Estimate,
    pub cells: Vec<GapCell>,
    /// Most negative `gap / se` over valid cells and the overall value.
    pub worst_z: f64,
}

impl GapReport {
    pub fn weak_duality_holds(&self, k: f64) -> bool {
        self.worst_z >= -k
    }

    pub fn relative_gap(&self) -> f64 {
        (self.gap.mean / self.direct.mean).abs()
    }
}

fn paired_gap(cost: &[f64], fbase: &[f64]) -> (f64, f64, f64, Vec<f64>) {
    let j = mean(cost);
    let (d, infl) = neg_log_mean_exp(fbase);
    let psi: Vec<f64> = cost.iter().zip(&infl).map(|(c, i)| (c - j) - i).collect();
    (j, d.mean, j - d.mean, psi)
}

/// Builds the gap report from paired per-path samples.
pub fn gap_from_samples(states: &[f64], cost: &[f64], fbase: &[f64], partition: &Partition) -> GapReport {
    let (j, d, g, psi) = paired_gap(cost, fbase);
    let se_j = batch_means(cost, DEFAULT_BATCHES).se;
    let (_, dinfl) = neg_log_mean_exp(fbase);
    let se_d = batch_means(&dinfl, DEFAULT_BATCHES).se;
    let se_g = batch_means(&psi, DEFAULT_BATCHES).se;
    let mut worst_z = z(g, se_g);
    let cells = if partition.n_cells() > 1 {
        partition
            .group(states)
            .iter()
            .map(|idx| {
                let c: Vec<f64> = idx.iter().map(|&i| cost[i]).collect();
                let fb: Vec<f64> = idx.iter().map(|&i| fbase[i]).collect();
                let (cj, cd, cg, cpsi) = paired_gap(&c, &fb);
                let se = mean_se(&cpsi).se;
                let (lo, hi) = cell_range(states, idx);
                let flagged = idx.len() < MIN_BIN_COUNT || !se.is_finite();
                if !flagged {
                    worst_z = worst_z.min(z(cg, se));
                }
                GapCell {
                    lo,
                    hi,
                    count: idx.len(),
                    objective: cj,
                    direct: cd,
                    gap: cg,
                    se,
                    flagged,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    GapReport {
        objective: Estimate { mean: j, se: se_j },
        direct: Estimate { mean: d, se: se_d },
        gap: Estimate { mean: g, se: se_g },
        cells,
        worst_z,
    }
}

fn z(v: f64, se: f64) -> f64 {
    if se > 0.0 {
        v / se
    } else if v < -1e-12 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

/// Duality gap of `policy` for each functional in `fs`, on one shared ensemble.
#[allow(clippy::too_many_arguments)]
pub fn duality_gaps(
    model: &Model,
    fs: &[Functional],
    policy: &DriftPolicy,
    tau: &StoppingRule,
    bins: usize,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<Vec<GapReport>> {
    for f in fs {
        f.validate(model.dim())?;
    }
    policy.validate(&grid, model.dim())?;
    let rows = try_par_map(n_paths, |i| {
        let s = block.stream(i);
        let base = model.sample_base(&s, grid)?;
        let shifted = model.apply_shift(&s, grid, policy)?;
        let (k, x) = stopped_state(tau, &base)?;
        if !tau.is_degenerate() && !shifted.u.is_zero_before(k) {
            return Err(Error::Precondition("drift must vanish before the stopping time".into()));
        }
        let h = shifted.half_energy();
        let vals: Vec<(f64, f64)> = fs
            .iter()
            .map(|f| (f.value(&shifted.w_path) + h, f.value(&base.w_path)))
            .collect();
        Ok((x, vals))
    })?;
    let states: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let partition = partition_for(tau, &states, bins);
    Ok((0..fs.len())
        .map(|j| {
            let cost: Vec<f64> = rows.iter().map(|r| r.1[j].0).collect();
            let fb: Vec<f64> = rows.iter().map(|r| r.1[j].1).collect();
            gap_from_samples(&states, &cost, &fb, &partition)
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn duality_gap(
    model: &Model,
    f: &Functional,
    policy: &DriftPolicy,
    tau: &StoppingRule,
    bins: usize,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<GapReport> {
    let mut v = duality_gaps(model, std::slice::from_ref(f), policy, tau, bins, grid, block, n_paths)?;
    Ok(v.remove(0))
}

/// `E_θ[f | F_τ] + E_θ[log dθ/dν | F_τ]` for `dθ/dν = ρ(-δ_β v)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyFormReport {
    pub value: Estimate,
    /// `value - direct value`, paired.
    pub excess: Estimate,
    pub cells: Vec<GapCell>,
    pub worst_z: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn entropy_form_value(
    model: &Model,
    f: &Functional,
    v: &DriftPolicy,
    tau: &StoppingRule,
    bins: usize,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<EntropyFormReport> {
    f.validate(model.dim())?;
    v.validate(&grid, model.dim())?;
    let rows = try_par_map(n_paths, |i| {
        let base = model.sample_base(&block.stream(i), grid)?;
        let dot = realize_on_path(v, &base.w_path, &base.beta_path)?;
        let log_l = wick(&dot, &base.beta_path)?.terminal();
        let (_, x) = stopped_state(tau, &base)?;
        Ok((x, f.value(&base.w_path), log_l))
    })?;
    let states: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let fv: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let l: Vec<f64> = rows.iter().map(|r| r.2.exp()).collect();
    let g: Vec<f64> = rows.iter().map(|r| r.1 + r.2).collect();
    let partition = partition_for(tau, &states, bins);

    let unit = crate::conditioning::binned_means(&states, &l, &partition)?;
    if unit.iter().any(|c| !c.flagged && !c.as_estimate().within(1.0, 4.0, 0.0)) {
        return Err(Error::Precondition(
            "density does not have unit conditional expectation; θ rejected".into(),
        ));
    }

    let summarize = |idx: &[usize]| {
        let ls: Vec<f64> = idx.iter().map(|&i| l[i]).collect();
        let ml = mean(&ls);
        let r = idx.iter().map(|&i| g[i] * l[i]).sum::<f64>() / idx.len() as f64 / ml;
        let fb: Vec<f64> = idx.iter().map(|&i| fv[i]).collect();
        let (d, dinfl) = neg_log_mean_exp(&fb);
        let vinfl: Vec<f64> = idx.iter().map(|&i| (g[i] - r) * l[i] / ml).collect();
        let psi: Vec<f64> = vinfl.iter().zip(&dinfl).map(|(a, b)| a - b).collect();
        (r, d.mean, vinfl, psi)
    };
    let all: Vec<usize> = (0..n_paths).collect();
    let (val, dir, vinfl, psi) = summarize(&all);
    let value = Estimate {
        mean: val,
        se: batch_means(&vinfl, DEFAULT_BATCHES).se,
    };
    let excess = Estimate {
        mean: val - dir,
        se: batch_means(&psi, DEFAULT_BATCHES).se,
    };
    let mut worst_z = z(excess.mean, excess.se);
    let cells = if partition.n_cells() > 1 {
        partition
            .group(&states)
            .iter()
            .map(|idx| {
                let (r, d, _, psi) = summarize(idx);
                let se = mean_se(&psi).se;
                let (lo, hi) = cell_range(&states, idx);
                let flagged = idx.len() < MIN_BIN_COUNT || !se.is_finite();
                if !flagged {
                    worst_z = worst_z.min(z(r - d, se));
                }
                GapCell {
                    lo,
                    hi,
                    count: idx.len(),
                    objective: r,
                    direct: d,
                    gap: r - d,
                    se,
                    flagged,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(EntropyFormReport {
        value,
        excess,
        cells,
        worst_z,
    })
}

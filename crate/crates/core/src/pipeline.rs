//! Approximation of a target density `L = ρ(-δ_β v)` by retarded shifts.
//!
//! Stages, applied in order to the drift `v`:
//! level truncation at `T_n = inf{s : L(s) >= n}`, mixing with a constant
//! `(L + a) / (1 + a)`, stopping once the drift energy reaches a budget,
//! clipping at `±m` and finally a delay by `η`. The delayed drift `γ^η`
//! gives a shift whose inverse is computable block by block.

use serde::{Deserialize, Serialize};

use crate::conditioning::StoppingRule;
use crate::error::{Error, Result};
use crate::girsanov::wick;
use crate::models::{realize_on_path, Model};
use crate::path_engine::{cm_norm_sq, CameronMartinPath, SamplePath, StreamBlock, TimeGrid};
use crate::policy::{DriftPolicy, StepContext};
use crate::stats::{batch_means, try_par_map, Estimate, DEFAULT_BATCHES};

/// Stage parameters. `level`, `energy` and `clip` may be infinite (stage inactive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub level: f64,
    pub mix: f64,
    pub energy: f64,
    pub clip: f64,
    /// Delay `η`, a positive multiple of `dt`.
    pub eta: f64,
    #[serde(default = "two")]
    pub p: f64,
    #[serde(default)]
    pub tau: Option<StoppingRule>,
}

fn two() -> f64 {
    2.0
}

pub const STAGE_NAMES: [&str; 5] = ["truncate_level", "mix_constant", "energy_stop", "clip_drift", "retard"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    /// `||D_{i-1} - D_i||_p`.
    pub lp_distance: Estimate,
    /// `E |u_{i-1} - u_i|_H^2`.
    pub h_distance: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub final_policy: DriftPolicy,
    pub stages: Vec<StageRow>,
    /// `||D_0 - D_5||_p`.
    pub total: Estimate,
    pub stage_sum: f64,
    /// Range of the mixed density and its bounds `a/(1+a)`, `(max L(T_n) + a)/(1+a)`.
    pub mix_range: (f64, f64),
    pub mix_bounds: (f64, f64),
    /// Final drift bounded by the clip level and zero before `τ` on every path.
    pub membership: bool,
}

impl PipelineReport {
    pub fn triangle_holds(&self, k: f64) -> bool {
        self.total.mean <= self.stage_sum + k * self.total.se + 1e-12
    }
}

/// Delay a policy by `η`.
pub fn retard(policy: DriftPolicy, eta: f64, grid: &TimeGrid) -> Result<DriftPolicy> {
    let j = grid.steps_for(eta)?;
    if j == 0 {
        return Err(Error::InvalidArgument("delay must be at least one step".into()));
    }
    Ok(policy.delayed(j))
}

impl PipelineSpec {
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if !(self.level > 0.0) || !(self.energy > 0.0) || !(self.clip > 0.0) {
            return Err(Error::InvalidArgument("level, energy and clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::InvalidArgument("mixing constant must lie in [0, 1]".into()));
        }
        if !(self.p >= 1.0) {
            return Err(Error::InvalidArgument("p must be at least 1".into()));
        }
        if grid.steps_for(self.eta)? == 0 {
            return Err(Error::InvalidArgument("delay must be at least one step".into()));
        }
        if let Some(t) = &self.tau {
            t.validate()?;
        }
        Ok(())
    }

    /// Stage drifts `P_0 .. P_5` (`P_2` mixes at the drift level).
    pub fn stage_policies(&self, target: &DriftPolicy, grid: &TimeGrid) -> Result<Vec<DriftPolicy>> {
        let p0 = match &self.tau {
            Some(t) => target.clone().vanish_before(t.clone()),
            None => target.clone(),
        };
        let p1 = if self.level.is_finite() { p0.clone().level_stopped(self.level) } else { p0.clone() };
        let p2 = if self.mix > 0.0 { p1.clone().mixed(self.mix) } else { p1.clone() };
        let p3 = if self.energy.is_finite() { p2.clone().energy_stopped(self.energy) } else { p2.clone() };
        let p4 = if self.clip.is_finite() { p3.clone().clipped(self.clip) } else { p3.clone() };
        let p5 = retard(p4.clone(), self.eta, grid)?;
        Ok(vec![p0, p1, p2, p3, p4, p5])
    }
}

/// Runs the stages on common base paths of the Wiener model.
pub fn run_pipeline(
    model: &Model,
    target: &DriftPolicy,
    spec: &PipelineSpec,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<PipelineReport> {
    if !model.is_wiener() {
        return Err(Error::Unsupported("the density pipeline runs on the Wiener family".into()));
    }
    spec.validate(&grid)?;
    let dim = model.dim();
    target.validate(&grid, dim)?;
    let policies = spec.stage_policies(target, &grid)?;
    let a = spec.mix;
    let k_tau = spec.tau.as_ref().map(|t| match t {
        StoppingRule::Deterministic { t } => Ok(grid.index_at_or_after(*t)),
        _ => Err(Error::Unsupported("pipeline τ must be deterministic".into())),
    });
    let k_tau = k_tau.transpose()?.unwrap_or(0);

    let rows = try_par_map(n_paths, |i| {
        let base = model.sample_base(&block.stream(i), grid)?;
        let dots: Vec<CameronMartinPath> = policies
            .iter()
            .map(|p| realize_on_path(p, &base.w_path, &base.beta_path))
            .collect::<Result<_>>()?;
        let mut dens: Vec<f64> = dots
            .iter()
            .map(|d| Ok(wick(d, &base.beta_path)?.terminal().exp()))
            .collect::<Result<_>>()?;
        let d1 = dens[1];
        // Mixing is exact at the density level.
        dens[2] = (d1 + a) / (1.0 + a);
        let h: Vec<f64> = (0..5)
            .map(|s| {
                let diff: Vec<f64> = dots[s].dot.iter().zip(&dots[s + 1].dot).map(|(x, y)| x - y).collect();
                cm_norm_sq(&CameronMartinPath {
                    grid,
                    dim,
                    dot: diff,
                })
            })
            .collect();
        let last = &dots[5];
        let member = last.dot.iter().all(|v| v.abs() <= spec.clip) && last.is_zero_before(k_tau);
        Ok((dens, h, d1, member))
    })?;

    let lp = |xs: Vec<f64>| -> Estimate {
        let e = batch_means(&xs, DEFAULT_BATCHES);
        if e.mean <= 0.0 {
            return Estimate::exact(0.0);
        }
        let d = e.mean.powf(1.0 / spec.p);
        Estimate {
            mean: d,
            se: e.se * d / (spec.p * e.mean),
        }
    };
    let p = spec.p;
    let mut stages = Vec::with_capacity(5);
    for s in 0..5 {
        let diffs: Vec<f64> = rows.iter().map(|r| (r.0[s] - r.0[s + 1]).abs().powf(p)).collect();
        let hs: Vec<f64> = rows.iter().map(|r| r.1[s]).collect();
        let lp_distance = lp(diffs);
        if !lp_distance.mean.is_finite() {
            return Err(Error::Numerical(format!(
                "stage {} distance is not finite; raise the level or clip",
                STAGE_NAMES[s]
            )));
        }
        stages.push(StageRow {
            stage: STAGE_NAMES[s].to_string(),
            lp_distance,
            h_distance: batch_means(&hs, DEFAULT_BATCHES),
        });
    }
    let total = lp(rows.iter().map(|r| (r.0[0] - r.0[5]).abs().powf(p)).collect());
    let stage_sum = stages.iter().map(|s| s.lp_distance.mean).sum();
    let mix_min = rows.iter().map(|r| r.0[2]).fold(f64::INFINITY, f64::min);
    let mix_max = rows.iter().map(|r| r.0[2]).fold(f64::NEG_INFINITY, f64::max);
    let l_max = rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    Ok(PipelineReport {
        final_policy: policies[5].clone(),
        stages,
        total,
        stage_sum,
        mix_range: (mix_min, mix_max),
        mix_bounds: (a / (1.0 + a), (l_max + a) / (1.0 + a)),
        membership: rows.iter().all(|r| r.3),
    })
}

/// Sup-norm reconstruction error and block count of a left inverse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseCertificate {
    pub max_reconstruction_error: f64,
    pub blocks_used: usize,
}

impl InverseCertificate {
    pub const TOLERANCE: f64 = 1e-8;

    pub fn passes(&self) -> bool {
        self.max_reconstruction_error <= Self::TOLERANCE
    }
}

/// `W^{-γ} = β - γ(β)` on the Wiener family.
pub fn retarded_observation(gamma: &DriftPolicy, beta: &SamplePath) -> Result<SamplePath> {
    let dot = realize_on_path(gamma, beta, beta)?;
    let g = dot.integrate();
    let mut out = beta.clone();
    for (o, s) in out.values.iter_mut().zip(&g.values) {
        *o -= s;
    }
    Ok(out)
}

/// Recovers `β` from `W^{-γ}(β)` for a delayed `γ`: on each block of length
/// `η` the drift only depends on the already reconstructed prefix.
/// With `truth`, the certificate holds the sup-norm error against it.
pub fn reconstruct_inverse(
    gamma: &DriftPolicy,
    observed: &SamplePath,
    truth: Option<&SamplePath>,
) -> Result<(SamplePath, InverseCertificate)> {
    let j = match gamma {
        DriftPolicy::Delayed { steps, .. } if *steps >= 1 => *steps,
        _ => {
            return Err(Error::Precondition(
                "only strictly delayed drifts are inverted block by block".into(),
            ))
        }
    };
    let grid = observed.grid;
    let d = observed.dim;
    let n = grid.n_steps();
    let dt = grid.dt();
    gamma.validate(&grid, d)?;
    let mut beta = SamplePath::zeros(grid, d);
    beta.row_mut(0).copy_from_slice(observed.row(0));
    let mut ev = gamma.start(&grid, d);
    let mut g = vec![0.0; d];
    let mut log_m = 0.0;
    let mut blocks = 0;
    for k in 0..n {
        if k % j == 0 {
            blocks += 1;
        }
        {
            let ctx = StepContext {
                grid: &grid,
                k,
                dim: d,
                path: &beta.values[..(k + 1) * d],
                beta: &beta.values[..(k + 1) * d],
                log_density: log_m,
            };
            ev.next(&ctx, &mut g)?;
        }
        for i in 0..d {
            let dobs = observed.values[(k + 1) * d + i] - observed.values[k * d + i];
            let db = dobs + g[i] * dt;
            beta.values[(k + 1) * d + i] = beta.values[k * d + i] + db;
            log_m += -g[i] * db - 0.5 * g[i] * g[i] * dt;
        }
    }
    let err = match truth {
        Some(t) => beta.sup_distance(t),
        None => 0.0,
    };
    Ok((
        beta,
        InverseCertificate {
            max_reconstruction_error: err,
            blocks_used: blocks,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_engine::{make_grid, sample_brownian, RngStream};

    #[test]
    fn retard_examples() {
        let g = make_grid(4).unwrap();
        let z = SamplePath::zeros(g, 1);
        let one = DriftPolicy::constant(&[1.0]);
        let d = retard(one.clone(), 0.25, &g).unwrap();
        assert_eq!(realize_on_path(&d, &z, &z).unwrap().dot, vec![0.0, 1.0, 1.0, 1.0]);
        let h = retard(one.clone(), 1.0, &g).unwrap();
        assert_eq!(realize_on_path(&h, &z, &z).unwrap().dot, vec![0.0; 4]);
        assert!(retard(one.clone(), 0.3, &g).is_err());
        assert!(retard(one, 0.0, &g).is_err());
    }

    #[test]
    fn inverse_of_zero_and_constant() {
        let g = make_grid(16).unwrap();
        let b = sample_brownian(&RngStream::new(2, 2), g, 1);
        let zero = DriftPolicy::Zero.delayed(1);
        let (r, c) = reconstruct_inverse(&zero, &b, Some(&b)).unwrap();
        assert_eq!(r, b);
        assert_eq!(c.blocks_used, 16);
        let gamma = DriftPolicy::constant(&[0.8]).delayed(1);
        let obs = retarded_observation(&gamma, &b).unwrap();
        let (_, c) = reconstruct_inverse(&gamma, &obs, Some(&b)).unwrap();
        assert!(c.max_reconstruction_error < 1e-14);
        assert!(reconstruct_inverse(&DriftPolicy::constant(&[0.8]), &obs, None).is_err());
    }
}

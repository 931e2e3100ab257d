use serde::{Deserialize, Serialize};

use super::{realize_on_path, Model};
use crate::conditioning::StoppingRule;
use crate::error::{Error, Result};
use crate::path_engine::{pi_tau, Projection, StreamBlock, TimeGrid};
use crate::policy::DriftPolicy;
use crate::stats::try_par_map;

/// Sup-norm discrepancies of the flow identities over an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    /// `β∘W^u - (β + u)`, `None` where the family's grid path does not
    /// determine its noise.
    pub noise_identity: Option<f64>,
    /// `W^u∘W^v - W^{v + u∘W^v}` for deterministic `u`, `v`.
    pub composition: Option<f64>,
    /// `W^u - W^{π_τ u}` on nodes up to `τ`.
    pub pre_tau: f64,
    pub n_paths: usize,
}

pub fn verify_flow_conditions(
    model: &Model,
    u: &DriftPolicy,
    v: &DriftPolicy,
    tau: &StoppingRule,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<FlowReport> {
    let dim = model.dim();
    u.validate(&grid, dim)?;
    v.validate(&grid, dim)?;
    let deterministic = u.is_deterministic() && v.is_deterministic();
    let sum = if deterministic {
        let any = crate::path_engine::SamplePath::zeros(grid, dim);
        let ud = realize_on_path(u, &any, &any)?;
        let vd = realize_on_path(v, &any, &any)?;
        Some((DriftPolicy::Deterministic { dot: ud.add(&vd)?.dot }, u.clone()))
    } else {
        None
    };

    let rows = try_par_map(n_paths, |i| {
        let s = block.stream(i);
        let shifted = model.apply_shift(&s, grid, u)?;

        let noise = match model.recover_noise(&shifted.w_path)? {
            Some(rec) => {
                let target = shifted.u.integrate();
                let mut worst: f64 = 0.0;
                for ((r, b), h) in rec.values.iter().zip(&shifted.beta_path.values).zip(&target.values) {
                    worst = worst.max((r - (b + h)).abs());
                }
                Some(worst)
            }
            None => None,
        };

        let composition = match &sum {
            Some((vu, u_det)) => {
                let wv = model.apply_shift(&s, grid, v)?;
                match model.recover_noise(&wv.w_path)? {
                    Some(bv) => {
                        let composed = model.shift_with_increments(grid, &bv.increments(), u_det)?;
                        let direct = model.apply_shift(&s, grid, vu)?;
                        Some(composed.w_path.sup_distance(&direct.w_path))
                    }
                    None => None,
                }
            }
            None => None,
        };

        let k_tau = tau.evaluate(&shifted.w_path, Some(shifted.log_wick_process().as_slice()))?;
        let before = pi_tau(&shifted.u, k_tau, Projection::BeforeTau)?;
        let projected = model.apply_shift(&s, grid, &DriftPolicy::Deterministic { dot: before.dot })?;
        let pre = shifted.w_path.sup_distance_until(&projected.w_path, k_tau);
        Ok::<_, Error>((noise, composition, pre))
    })?;

    let fold = |xs: Vec<Option<f64>>| -> Option<f64> {
        xs.into_iter().try_fold(0.0f64, |acc, x| x.map(|v| acc.max(v)))
    };
    let noise_identity = fold(rows.iter().map(|r| r.0).collect());
    let composition = fold(rows.iter().map(|r| r.1).collect());
    let pre_tau = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    Ok(FlowReport {
        noise_identity,
        composition,
        pre_tau,
        n_paths,
    })
}

//! Conditional Prékopa–Leindler inequality on Wiener space.
//!
//! With `a = e^{-φ_a}`, `b = e^{-φ_b}`, `c = e^{-φ_c}`, the hypothesis
//!
//! `a(w + sh + (1-s)k) e^{-½|sh+(1-s)k|^2} >= (b(w + h) e^{-½|h|^2})^s (c(w + k) e^{-½|k|^2})^{1-s}`
//!
//! is sampled over `h, k` with constant densities, and the conclusion
//! `E_θ[a | F_τ] >= E_θ[b | F_τ]^s E_θ[c | F_τ]^{1-s}` is checked per cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{bayes_conditional, cell_range, stopped_state, Partition, StoppingRule, MIN_BIN_COUNT};
use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::girsanov::wick;
use crate::models::{realize_on_path, Model};
use crate::path_engine::{sample_brownian, SamplePath, StreamBlock, TimeGrid};
use crate::policy::DriftPolicy;
use crate::stats::{mean, mean_se, try_par_map};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PLInstance {
    /// `a = exp(-phi_a)`.
    pub phi_a: Functional,
    pub phi_b: Functional,
    pub phi_c: Functional,
    pub s: f64,
    /// Drift `v` of the density `d = ρ(-δ_β v)`; must vanish before `τ`.
    #[serde(default = "zero")]
    pub density: DriftPolicy,
    pub tau: StoppingRule,
}

fn zero() -> DriftPolicy {
    DriftPolicy::Zero
}

/// Why the quadratic family satisfies the hypothesis: `h ↦ φ(w + h) + ½|h|_H^2`
/// is a quadratic form in `h` whose Hessian is bounded below by `hessian_lower_bound`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityCertificate {
    pub q: f64,
    pub hessian_lower_bound: f64,
}

impl ConvexityCertificate {
    pub fn convex(&self) -> bool {
        self.hessian_lower_bound >= 0.0
    }
}

fn quadratic_phi(q: f64, linear: f64, shift: f64) -> Functional {
    Functional::Sum {
        terms: vec![
            Functional::TerminalQuadratic {
                scale: q,
                center: vec![shift],
            },
            Functional::TerminalLinear { weights: vec![linear] },
        ],
    }
}

/// `a = b = c = exp(-(q W(1)^2 + linear W(1)))`.
pub fn quadratic_family(q: f64, linear: f64, s: f64, tau: StoppingRule) -> Result<(PLInstance, ConvexityCertificate)> {
    if !(q >= 0.0) {
        return Err(Error::InvalidArgument(format!("curvature must be nonnegative, got {q}")));
    }
    let inst = quadratic_unchecked(q, linear, s, tau)?;
    // |h(1)|^2 <= |h|_H^2, so the Hessian 2q h(1)^2 + |h|_H^2 is >= (1 + 2 min(q, 0)) |h|_H^2.
    Ok((
        inst,
        ConvexityCertificate {
            q,
            hessian_lower_bound: 1.0 + 2.0 * q.min(0.0),
        },
    ))
}

/// Same shape without the sign check, for control experiments.
pub fn quadratic_unchecked(q: f64, linear: f64, s: f64, tau: StoppingRule) -> Result<PLInstance> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("s = {s} outside [0, 1]")));
    }
    let phi = quadratic_phi(q, linear, 0.0);
    Ok(PLInstance {
        phi_a: phi.clone(),
        phi_b: phi.clone(),
        phi_c: phi,
        s,
        density: DriftPolicy::Zero,
        tau,
    })
}

/// `a = e^{-q W(1)^2}`, `b = e^{-q (W(1) - m)^2}`, `c = e^{-q (W(1) + m)^2}` at `s = ½`:
/// the hypothesis holds by midpoint convexity, the three functions differ.
pub fn shifted_quadratic(q: f64, m: f64, tau: StoppingRule) -> Result<PLInstance> {
    if !(q >= 0.0) {
        return Err(Error::InvalidArgument(format!("curvature must be nonnegative, got {q}")));
    }
    Ok(PLInstance {
        phi_a: quadratic_phi(q, 0.0, 0.0),
        phi_b: quadratic_phi(q, 0.0, m),
        phi_c: quadratic_phi(q, 0.0, -m),
        s: 0.5,
        density: DriftPolicy::Zero,
        tau,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub min_margin: f64,
    pub violations: usize,
    pub non_finite: usize,
    pub n_triples: usize,
}

fn shifted(w: &SamplePath, h: &[f64]) -> SamplePath {
    let mut out = w.clone();
    let d = w.dim;
    for k in 0..=w.grid.n_steps() {
        let t = w.grid.t(k);
        for i in 0..d {
            out.values[k * d + i] += h[i] * t;
        }
    }
    out
}

/// Samples `(w, s, h, k)` with `ḣ, k̇` constant in `[-bound, bound]^dim`.
/// With `sample_s`, `s` is drawn uniformly; otherwise the instance's `s` is used.
/// A margin below `-1e-12` counts as a violation.
#[allow(clippy::too_many_arguments)]
pub fn check_hypothesis(
    inst: &PLInstance,
    dim: usize,
    bound: f64,
    sample_s: bool,
    grid: TimeGrid,
    block: StreamBlock,
    n_triples: usize,
) -> Result<HypothesisReport> {
    for f in [&inst.phi_a, &inst.phi_b, &inst.phi_c] {
        f.validate(dim)?;
    }
    let margins = try_par_map(n_triples, |i| {
        let st = block.stream(i);
        let w = sample_brownian(&st, grid, dim);
        let mut r = st.lane(7).rng();
        let s = if sample_s { r.random::<f64>() } else { inst.s };
        let h: Vec<f64> = (0..dim).map(|_| r.random_range(-bound..=bound)).collect();
        let k: Vec<f64> = (0..dim).map(|_| r.random_range(-bound..=bound)).collect();
        let mid: Vec<f64> = h.iter().zip(&k).map(|(a, b)| s * a + (1.0 - s) * b).collect();
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let lhs = -inst.phi_a.value(&shifted(&w, &mid)) - 0.5 * sq(&mid);
        let rb = -inst.phi_b.value(&shifted(&w, &h)) - 0.5 * sq(&h);
        let rc = -inst.phi_c.value(&shifted(&w, &k)) - 0.5 * sq(&k);
        Ok(lhs - s * rb - (1.0 - s) * rc)
    })?;
    let finite: Vec<f64> = margins.iter().copied().filter(|m| m.is_finite()).collect();
    Ok(HypothesisReport {
        min_margin: finite.iter().copied().fold(f64::INFINITY, f64::min),
        violations: finite.iter().filter(|m| **m < -1e-12).count(),
        non_finite: margins.len() - finite.len(),
        n_triples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackCell {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub ea: f64,
    pub eb: f64,
    pub ec: f64,
    pub slack: f64,
    pub se: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConclusionReport {
    pub cells: Vec<SlackCell>,
    /// Smallest `slack + k se` margin is judged by [`ConclusionReport::holds`].
    pub min_slack: f64,
}

impl ConclusionReport {
    /// Every valid cell has `slack >= -(k se + 1e-10)`.
    pub fn holds(&self, k: f64) -> bool {
        self.cells
            .iter()
            .filter(|c| !c.flagged)
            .all(|c| c.slack >= -(k * c.se + 1e-10))
    }
}

/// Per-cell slack `E_θ[a|F_τ] - E_θ[b|F_τ]^s E_θ[c|F_τ]^{1-s}` with `dθ = d dν`.
/// Non-Wiener families need `allow_non_wiener`.
#[allow(clippy::too_many_arguments)]
pub fn check_conclusion(
    model: &Model,
    inst: &PLInstance,
    bins: usize,
    allow_non_wiener: bool,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<ConclusionReport> {
    if !model.is_wiener() && !allow_non_wiener {
        return Err(Error::Unsupported(
            "Prékopa–Leindler checks default to the Wiener family".into(),
        ));
    }
    let dim = model.dim();
    for f in [&inst.phi_a, &inst.phi_b, &inst.phi_c] {
        f.validate(dim)?;
    }
    inst.density.validate(&grid, dim)?;
    let rows = try_par_map(n_paths, |i| {
        let p = model.sample_base(&block.stream(i), grid)?;
        let (k, x) = stopped_state(&inst.tau, &p)?;
        let dot = realize_on_path(&inst.density, &p.w_path, &p.beta_path)?;
        if !dot.is_zero_before(k) {
            return Err(Error::Precondition("density drift must vanish before τ".into()));
        }
        let l = wick(&dot, &p.beta_path)?.terminal().exp();
        let w = &p.w_path;
        Ok((x, l, (-inst.phi_a.value(w)).exp(), (-inst.phi_b.value(w)).exp(), (-inst.phi_c.value(w)).exp()))
    })?;
    let states: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let l: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let partition = if inst.tau.is_degenerate() {
        Partition::single()
    } else {
        Partition::quantiles(&states, bins)
    };
    let col = |j: usize| -> Vec<f64> {
        rows.iter()
            .map(|r| match j {
                0 => r.2,
                1 => r.3,
                _ => r.4,
            })
            .collect()
    };
    let (a, b, c) = (col(0), col(1), col(2));
    let ca = bayes_conditional(&states, &a, &l, &partition)?;
    let cb = bayes_conditional(&states, &b, &l, &partition)?;
    let cc = bayes_conditional(&states, &c, &l, &partition)?;
    let s = inst.s;
    let groups = partition.group(&states);
    let cells: Vec<SlackCell> = groups
        .iter()
        .enumerate()
        .map(|(j, idx)| {
            let (ra, rb, rc) = (ca[j].estimate, cb[j].estimate, cc[j].estimate);
            let ml = mean(&idx.iter().map(|&i| l[i]).collect::<Vec<_>>());
            let gb = s * rb.powf(s - 1.0) * rc.powf(1.0 - s);
            let gc = (1.0 - s) * rb.powf(s) * rc.powf(-s);
            let psi: Vec<f64> = idx
                .iter()
                .map(|&i| {
                    let w = l[i] / ml;
                    w * ((a[i] - ra) - gb * (b[i] - rb) - gc * (c[i] - rc))
                })
                .collect();
            let (lo, hi) = cell_range(&states, idx);
            SlackCell {
                lo,
                hi,
                count: idx.len(),
                ea: ra,
                eb: rb,
                ec: rc,
                slack: ra - rb.powf(s) * rc.powf(1.0 - s),
                se: mean_se(&psi).se,
                flagged: ca[j].flagged || cb[j].flagged || cc[j].flagged || idx.len() < MIN_BIN_COUNT,
            }
        })
        .collect();
    let min_slack = cells
        .iter()
        .filter(|c| !c.flagged)
        .map(|c| c.slack)
        .fold(f64::INFINITY, f64::min);
    Ok(ConclusionReport { cells, min_slack })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_engine::make_grid;

    #[test]
    fn negative_curvature_rejected() {
        assert!(quadratic_family(-0.1, 0.0, 0.5, StoppingRule::degenerate()).is_err());
        let (_, cert) = quadratic_family(0.3, 0.0, 0.5, StoppingRule::degenerate()).unwrap();
        assert!(cert.convex());
    }

    #[test]
    fn flat_instance_has_zero_margin() {
        let (inst, _) = quadratic_family(0.0, 0.0, 0.5, StoppingRule::degenerate()).unwrap();
        let g = make_grid(8).unwrap();
        let r = check_hypothesis(&inst, 1, 2.0, true, g, StreamBlock::new(1, 0), 200).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.min_margin >= -1e-12);
    }
}

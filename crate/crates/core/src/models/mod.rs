//! Base measures and their adapted shifts `W^u`.
//!
//! Every family is simulated from its driving noise `β`: the shifted path
//! `W^u` solves the family's equation driven by `β + u`, with the drift
//! policy evaluated step by step on the evolving `W^u`.

mod flow;
mod loop_measure;
mod particles;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path_engine::{
    draw_increments, standard_normal, CameronMartinPath, RngStream, SamplePath, TimeGrid,
};
use crate::policy::{DriftPolicy, StepContext};

pub use flow::{verify_flow_conditions, FlowReport};
pub use loop_measure::{LoopQuadrature, SphereWeight, TERMINAL_GUARD};
pub use particles::MAX_HALVINGS;

use particles::ParticleParams;

/// Configuration of a base measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureModel {
    Wiener {
        dim: usize,
    },
    BrownianBridge {
        endpoint: Vec<f64>,
    },
    LoopMeasure {
        dim: usize,
        #[serde(default = "uniform")]
        weight: SphereWeight,
        #[serde(default = "default_nodes")]
        nodes: usize,
    },
    /// `dX = b(X) dt + σ(X) dβ` with diagonal
    /// `σ_i(x) = scale_i (1 + amp tanh x_i)` and `b_i(x) = drift_i - kappa tanh x_i`.
    Diffusion {
        scale: Vec<f64>,
        #[serde(default)]
        amp: f64,
        drift: Vec<f64>,
        #[serde(default)]
        kappa: f64,
        start: Vec<f64>,
    },
    /// `dZ_i = σ dβ_i + (b Z_i + c) dt + γ Σ_{j≠i} dt / (Z_i - Z_j)`.
    Particles {
        sigma: f64,
        b: f64,
        c: f64,
        gamma: f64,
        z0: Vec<f64>,
    },
}

fn uniform() -> SphereWeight {
    SphereWeight::Uniform
}

fn default_nodes() -> usize {
    64
}

impl MeasureModel {
    pub fn dim(&self) -> usize {
        match self {
            MeasureModel::Wiener { dim } | MeasureModel::LoopMeasure { dim, .. } => *dim,
            MeasureModel::BrownianBridge { endpoint } => endpoint.len(),
            MeasureModel::Diffusion { start, .. } => start.len(),
            MeasureModel::Particles { z0, .. } => z0.len(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            MeasureModel::Wiener { .. } => "wiener",
            MeasureModel::BrownianBridge { .. } => "brownian_bridge",
            MeasureModel::LoopMeasure { .. } => "loop_measure",
            MeasureModel::Diffusion { .. } => "diffusion",
            MeasureModel::Particles { .. } => "particles",
        }
    }
}

/// A shifted path together with its driving noise and realized drift.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedPair {
    pub w_path: SamplePath,
    pub beta_path: SamplePath,
    pub u: CameronMartinPath,
    /// `log ρ(-δ_β u)`.
    pub log_wick: f64,
}

impl ShiftedPair {
    /// `½ |u|_H^2`.
    pub fn half_energy(&self) -> f64 {
        0.5 * crate::path_engine::cm_norm_sq(&self.u)
    }

    /// `log ρ(-δ_β π_{t_k} u)` at every node.
    pub fn log_wick_process(&self) -> Vec<f64> {
        let d = self.u.dim;
        let dt = self.u.grid.dt();
        let mut out = Vec::with_capacity(self.u.grid.n_steps() + 1);
        let mut acc = 0.0;
        out.push(acc);
        for k in 0..self.u.grid.n_steps() {
            for i in 0..d {
                let v = self.u.dot[k * d + i];
                let db = self.beta_path.values[(k + 1) * d + i] - self.beta_path.values[k * d + i];
                acc += -v * db - 0.5 * v * v * dt;
            }
            out.push(acc);
        }
        out
    }
}

/// A validated model ready for sampling.
#[derive(Clone, Debug)]
pub struct Model {
    spec: MeasureModel,
    quad: Option<LoopQuadrature>,
}

enum Noise<'a> {
    Stream(&'a RngStream),
    Increments(&'a [f64]),
}

impl Model {
    pub fn new(spec: MeasureModel) -> Result<Self> {
        let dim = spec.dim();
        if dim == 0 {
            return Err(Error::InvalidArgument("model dimension must be positive".into()));
        }
        let mut quad = None;
        match &spec {
            MeasureModel::Wiener { .. } => {}
            MeasureModel::BrownianBridge { endpoint } => finite("bridge endpoint", endpoint)?,
            MeasureModel::LoopMeasure { weight, nodes, .. } => {
                quad = Some(LoopQuadrature::new(dim, weight, *nodes)?);
            }
            MeasureModel::Diffusion {
                scale,
                amp,
                drift,
                kappa,
                start,
            } => {
                for (what, v) in [("diffusion scale", scale), ("diffusion drift", drift)] {
                    if v.len() != dim {
                        return Err(Error::Mismatch {
                            what,
                            expected: dim,
                            found: v.len(),
                        });
                    }
                    finite(what, v)?;
                }
                finite("diffusion start", start)?;
                if scale.iter().any(|s| *s <= 0.0) || !(amp.abs() < 1.0) || !kappa.is_finite() {
                    return Err(Error::InvalidArgument(
                        "diffusion needs scale > 0 and |amp| < 1 (σ bounded away from 0)".into(),
                    ));
                }
            }
            MeasureModel::Particles {
                sigma,
                b,
                c,
                gamma,
                z0,
            } => {
                finite("particle start", z0)?;
                if !(sigma * sigma <= 2.0 * gamma) || !b.is_finite() || !c.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "particles need σ² <= 2γ, got σ = {sigma}, γ = {gamma}"
                    )));
                }
                if z0.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidArgument("z0 must be strictly increasing".into()));
                }
            }
        }
        Ok(Self { spec, quad })
    }

    pub fn spec(&self) -> &MeasureModel {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn is_wiener(&self) -> bool {
        matches!(self.spec, MeasureModel::Wiener { .. })
    }

    /// Initial point `W(0)`.
    pub fn start(&self) -> Vec<f64> {
        match &self.spec {
            MeasureModel::Diffusion { start, .. } => start.clone(),
            MeasureModel::Particles { z0, .. } => z0.clone(),
            _ => vec![0.0; self.dim()],
        }
    }

    /// `∇ log h` for the loop measure.
    pub fn loop_drift(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.quad {
            Some(q) => q.drift(t, x, out),
            None => Err(Error::Unsupported(format!(
                "loop drift on the {} family",
                self.spec.family()
            ))),
        }
    }

    /// `W^0 = W`.
    pub fn sample_base(&self, rng: &RngStream, grid: TimeGrid) -> Result<ShiftedPair> {
        self.apply_shift(rng, grid, &DriftPolicy::Zero)
    }

    pub fn apply_shift(&self, rng: &RngStream, grid: TimeGrid, policy: &DriftPolicy) -> Result<ShiftedPair> {
        self.simulate(Noise::Stream(rng), grid, policy, None)
    }

    /// Shift driven by explicit `N(0, dt)` increments (`n_steps * dim`).
    pub fn shift_with_increments(
        &self,
        grid: TimeGrid,
        increments: &[f64],
        policy: &DriftPolicy,
    ) -> Result<ShiftedPair> {
        self.simulate(Noise::Increments(increments), grid, policy, None)
    }

    /// Keeps `prefix` on nodes `0..=k` and continues with fresh noise.
    pub fn continue_from(
        &self,
        prefix: &ShiftedPair,
        k: usize,
        rng: &RngStream,
        policy: &DriftPolicy,
    ) -> Result<ShiftedPair> {
        if k > prefix.w_path.grid.n_steps() {
            return Err(Error::IndexOutOfRange {
                index: k,
                max: prefix.w_path.grid.n_steps(),
            });
        }
        self.simulate(Noise::Stream(rng), prefix.w_path.grid, policy, Some((prefix, k)))
    }

    fn simulate(
        &self,
        noise: Noise<'_>,
        grid: TimeGrid,
        policy: &DriftPolicy,
        resume: Option<(&ShiftedPair, usize)>,
    ) -> Result<ShiftedPair> {
        let dim = self.dim();
        let n = grid.n_steps();
        let dt = grid.dt();
        let mut lane = None;
        let (dbeta, extra) = match noise {
            Noise::Stream(rng) => {
                let mut r = rng.rng();
                let inc = draw_increments(&mut r, grid, dim);
                let extra = if matches!(self.spec, MeasureModel::BrownianBridge { .. }) {
                    (0..n * dim).map(|_| standard_normal(&mut r)).collect()
                } else {
                    Vec::new()
                };
                if matches!(self.spec, MeasureModel::Particles { .. }) {
                    lane = Some(rng.lane(1).rng());
                }
                (inc, extra)
            }
            Noise::Increments(inc) => {
                if inc.len() != n * dim {
                    return Err(Error::Mismatch {
                        what: "increment count",
                        expected: n * dim,
                        found: inc.len(),
                    });
                }
                if matches!(
                    self.spec,
                    MeasureModel::BrownianBridge { .. } | MeasureModel::Particles { .. }
                ) {
                    return Err(Error::Unsupported(format!(
                        "explicit increments for the {} family",
                        self.spec.family()
                    )));
                }
                (inc.to_vec(), Vec::new())
            }
        };

        let mut w = SamplePath::zeros(grid, dim);
        let mut beta = SamplePath::zeros(grid, dim);
        let mut udot = vec![0.0; n * dim];
        let mut log_wick = 0.0;
        let k0 = match resume {
            Some((p, k)) => {
                let end = (k + 1) * dim;
                w.values[..end].copy_from_slice(&p.w_path.values[..end]);
                beta.values[..end].copy_from_slice(&p.beta_path.values[..end]);
                udot[..k * dim].copy_from_slice(&p.u.dot[..k * dim]);
                log_wick = partial_log_wick(&udot[..k * dim], &beta, dt);
                k
            }
            None => {
                w.row_mut(0).copy_from_slice(&self.start());
                0
            }
        };
        for k in k0 + 1..=n {
            for i in 0..dim {
                beta.values[k * dim + i] = beta.values[(k - 1) * dim + i] + dbeta[(k - 1) * dim + i];
            }
        }

        // Replays the policy on the prefix so stateful evaluators are in sync.
        let mut ev = policy.start(&grid, dim);
        let mut ud = vec![0.0; dim];
        let mut replay_log = 0.0;
        for k in 0..k0 {
            let ctx = StepContext {
                grid: &grid,
                k,
                dim,
                path: &w.values[..(k + 1) * dim],
                beta: &beta.values[..(k + 1) * dim],
                log_density: replay_log,
            };
            ev.next(&ctx, &mut ud)?;
            let row = &udot[k * dim..(k + 1) * dim];
            for i in 0..dim {
                let db = beta.values[(k + 1) * dim + i] - beta.values[k * dim + i];
                replay_log += -row[i] * db - 0.5 * row[i] * row[i] * dt;
            }
        }

        let mut bridge_i = match &self.spec {
            MeasureModel::BrownianBridge { endpoint } if k0 < n => {
                let t = grid.t(k0);
                w.row(k0)
                    .iter()
                    .zip(endpoint)
                    .map(|(x, a)| (x - a * t) / (1.0 - t))
                    .collect()
            }
            _ => Vec::new(),
        };
        let mut x = w.row(k0).to_vec();
        let mut drift = vec![0.0; dim];
        for k in k0..n {
            {
                let ctx = StepContext {
                    grid: &grid,
                    k,
                    dim,
                    path: &w.values[..(k + 1) * dim],
                    beta: &beta.values[..(k + 1) * dim],
                    log_density: log_wick,
                };
                ev.next(&ctx, &mut ud)?;
            }
            if ud.iter().any(|v| !v.is_finite()) {
                return Err(Error::Policy(format!("non-finite drift at step {k}")));
            }
            let db = &dbeta[k * dim..(k + 1) * dim];
            for i in 0..dim {
                log_wick += -ud[i] * db[i] - 0.5 * ud[i] * ud[i] * dt;
            }
            udot[k * dim..(k + 1) * dim].copy_from_slice(&ud);
            let t = grid.t(k);
            match &self.spec {
                MeasureModel::Wiener { .. } => {
                    for i in 0..dim {
                        x[i] += db[i] + ud[i] * dt;
                    }
                }
                MeasureModel::BrownianBridge { endpoint } => {
                    if k + 1 == n {
                        x.copy_from_slice(endpoint);
                    } else {
                        let t1 = grid.t(k + 1);
                        let (s0, s1) = (1.0 - t, 1.0 - t1);
                        let c = (s0 / s1).ln();
                        let var = dt / (s0 * s1);
                        let resid = (var - c * c / dt).max(0.0).sqrt();
                        let z = &extra[k * dim..(k + 1) * dim];
                        for i in 0..dim {
                            bridge_i[i] += (c / dt) * db[i] + resid * z[i] + ud[i] * c;
                            x[i] = endpoint[i] * t1 + s1 * bridge_i[i];
                        }
                    }
                }
                MeasureModel::LoopMeasure { .. } => {
                    self.loop_drift(t, &x, &mut drift)?;
                    for i in 0..dim {
                        x[i] += drift[i] * dt + db[i] + ud[i] * dt;
                    }
                }
                MeasureModel::Diffusion {
                    scale,
                    amp,
                    drift: b0,
                    kappa,
                    ..
                } => {
                    for i in 0..dim {
                        let th = x[i].tanh();
                        let sig = scale[i] * (1.0 + amp * th);
                        let b = b0[i] - kappa * th;
                        x[i] += b * dt + sig * (db[i] + ud[i] * dt);
                    }
                }
                MeasureModel::Particles {
                    sigma, b, c, gamma, ..
                } => {
                    let p = ParticleParams {
                        sigma: *sigma,
                        b: *b,
                        c: *c,
                        gamma: *gamma,
                    };
                    let r = lane.as_mut().expect("particle lane");
                    p.advance(&mut x, dt, db, &ud, 0, r, k)?;
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "{} path left the finite range at step {k}",
                    self.spec.family()
                )));
            }
            w.row_mut(k + 1).copy_from_slice(&x);
        }
        Ok(ShiftedPair {
            w_path: w,
            beta_path: beta,
            u: CameronMartinPath::from_dot(grid, dim, udot)?,
            log_wick,
        })
    }

    /// Driving noise `β^u` read back from a path by inverting one Euler step
    /// at a time. Exact up to rounding for the Wiener, loop and diffusion
    /// families; `None` where the discrete path does not determine the noise.
    pub fn recover_noise(&self, w: &SamplePath) -> Result<Option<SamplePath>> {
        let dim = self.dim();
        let grid = w.grid;
        let dt = grid.dt();
        let n = grid.n_steps();
        let mut inc = vec![0.0; n * dim];
        let mut dx = vec![0.0; dim];
        let mut drift = vec![0.0; dim];
        for k in 0..n {
            w.increment_into(k, &mut dx);
            let x = w.row(k);
            let out = &mut inc[k * dim..(k + 1) * dim];
            match &self.spec {
                MeasureModel::Wiener { .. } => out.copy_from_slice(&dx),
                MeasureModel::LoopMeasure { .. } => {
                    self.loop_drift(grid.t(k), x, &mut drift)?;
                    for i in 0..dim {
                        out[i] = dx[i] - drift[i] * dt;
                    }
                }
                MeasureModel::Diffusion {
                    scale,
                    amp,
                    drift: b0,
                    kappa,
                    ..
                } => {
                    for i in 0..dim {
                        let th = x[i].tanh();
                        let sig = scale[i] * (1.0 + amp * th);
                        out[i] = (dx[i] - (b0[i] - kappa * th) * dt) / sig;
                    }
                }
                _ => return Ok(None),
            }
        }
        Ok(Some(SamplePath::from_increments(grid, &vec![0.0; dim], &inc)))
    }
}

fn partial_log_wick(udot: &[f64], beta: &SamplePath, dt: f64) -> f64 {
    let d = beta.dim;
    let mut acc = 0.0;
    for (j, v) in udot.iter().enumerate() {
        let (k, i) = (j / d, j % d);
        let db = beta.values[(k + 1) * d + i] - beta.values[k * d + i];
        acc += -v * db - 0.5 * v * v * dt;
    }
    acc
}

fn finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be finite")))
    }
}

/// Evaluates `policy` open-loop along a given path, with `β` the path's
/// driving noise; returns the realized drift density.
pub fn realize_on_path(
    policy: &DriftPolicy,
    path: &SamplePath,
    beta: &SamplePath,
) -> Result<CameronMartinPath> {
    let grid = path.grid;
    let dim = path.dim;
    let dt = grid.dt();
    let mut ev = policy.start(&grid, dim);
    let mut dot = vec![0.0; grid.n_steps() * dim];
    let mut log_m = 0.0;
    for k in 0..grid.n_steps() {
        let ctx = StepContext {
            grid: &grid,
            k,
            dim,
            path: &path.values[..(k + 1) * dim],
            beta: &beta.values[..(k + 1) * dim],
            log_density: log_m,
        };
        let row = &mut dot[k * dim..(k + 1) * dim];
        ev.next(&ctx, row)?;
        for i in 0..dim {
            let db = beta.values[(k + 1) * dim + i] - beta.values[k * dim + i];
            log_m += -row[i] * db - 0.5 * row[i] * row[i] * dt;
        }
    }
    CameronMartinPath::from_dot(grid, dim, dot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_engine::{make_grid, sample_brownian};

    #[test]
    fn wiener_base_is_brownian() {
        let g = make_grid(16).unwrap();
        let m = Model::new(MeasureModel::Wiener { dim: 2 }).unwrap();
        let s = RngStream::new(3, 9);
        let p = m.sample_base(&s, g).unwrap();
        assert_eq!(p.w_path, sample_brownian(&s, g, 2));
        assert_eq!(p.beta_path, p.w_path);
        assert_eq!(p.log_wick, 0.0);
    }

    #[test]
    fn constant_shift_on_wiener() {
        let g = make_grid(8).unwrap();
        let m = Model::new(MeasureModel::Wiener { dim: 1 }).unwrap();
        let s = RngStream::new(1, 2);
        let p = m.apply_shift(&s, g, &DriftPolicy::constant(&[0.7])).unwrap();
        let b1 = p.beta_path.terminal()[0];
        assert!((p.w_path.terminal()[0] - (b1 + 0.7)).abs() < 1e-14);
        assert!((p.log_wick - (-0.7 * b1 - 0.245)).abs() < 1e-14);
    }

    #[test]
    fn bridge_hits_endpoint() {
        let g = make_grid(64).unwrap();
        let m = Model::new(MeasureModel::BrownianBridge {
            endpoint: vec![0.3, -1.0],
        })
        .unwrap();
        for i in 0..20 {
            let p = m
                .apply_shift(&RngStream::new(5, i), g, &DriftPolicy::constant(&[1.0, 2.0]))
                .unwrap();
            assert!((p.w_path.terminal()[0] - 0.3).abs() < 1e-8);
            assert!((p.w_path.terminal()[1] + 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn particles_reject_bad_parameters() {
        let bad = MeasureModel::Particles {
            sigma: 2.0,
            b: 0.0,
            c: 0.0,
            gamma: 1.0,
            z0: vec![-1.0, 1.0],
        };
        assert!(Model::new(bad).is_err());
        let unordered = MeasureModel::Particles {
            sigma: 1.0,
            b: 0.0,
            c: 0.0,
            gamma: 1.0,
            z0: vec![1.0, -1.0],
        };
        assert!(Model::new(unordered).is_err());
    }

    #[test]
    fn continuation_keeps_prefix() {
        let g = make_grid(16).unwrap();
        let m = Model::new(MeasureModel::BrownianBridge { endpoint: vec![0.5] }).unwrap();
        let p = m.sample_base(&RngStream::new(1, 1), g).unwrap();
        let q = m.continue_from(&p, 8, &RngStream::new(1, 2), &DriftPolicy::Zero).unwrap();
        assert_eq!(p.w_path.values[..9], q.w_path.values[..9]);
        assert_ne!(p.w_path.values[12], q.w_path.values[12]);
        assert!((q.w_path.terminal()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn noise_recovery_is_exact_for_diffusion() {
        let g = make_grid(32).unwrap();
        let m = Model::new(MeasureModel::Diffusion {
            scale: vec![1.0],
            amp: 0.1,
            drift: vec![0.2],
            kappa: 0.5,
            start: vec![0.1],
        })
        .unwrap();
        let p = m.apply_shift(&RngStream::new(2, 4), g, &DriftPolicy::constant(&[0.5])).unwrap();
        let rec = m.recover_noise(&p.w_path).unwrap().unwrap();
        let shift = p.u.integrate();
        let target = p.beta_path.values.iter().zip(&shift.values).map(|(a, b)| a + b);
        for (r, t) in rec.values.iter().zip(target) {
            assert!((r - t).abs() < 1e-12);
        }
    }

    #[test]
    fn model_spec_roundtrip() {
        let spec = MeasureModel::LoopMeasure {
            dim: 2,
            weight: SphereWeight::Tilted { amp: 0.2 },
            nodes: 64,
        };
        let s = toml::to_string(&spec).unwrap();
        assert_eq!(toml::from_str::<MeasureModel>(&s).unwrap(), spec);
    }
}

//! Adapted drift policies.
//!
//! A [`DriftPolicy`] is an immutable description; [`DriftPolicy::start`]
//! creates a per-path evaluator that is stepped once per grid step, in
//! order, and sees only path information up to the current node.

use serde::{Deserialize, Serialize};

use crate::conditioning::StoppingRule;
use crate::error::{Error, Result};
use crate::path_engine::TimeGrid;

/// Everything a policy may look at when choosing the drift on `[t_k, t_{k+1})`.
pub struct StepContext<'a> {
    pub grid: &'a TimeGrid,
    pub k: usize,
    pub dim: usize,
    /// Observed path, rows `0..=k` valid.
    pub path: &'a [f64],
    /// Driving noise, rows `0..=k` valid.
    pub beta: &'a [f64],
    /// `log ρ(-δ_β π_{t_k} u)` of the drift realized so far.
    pub log_density: f64,
}

impl<'a> StepContext<'a> {
    #[inline]
    pub fn t(&self) -> f64 {
        self.grid.t(self.k)
    }

    #[inline]
    pub fn state(&self) -> &'a [f64] {
        &self.path[self.k * self.dim..(self.k + 1) * self.dim]
    }

    /// `β(t_k) - β(t_{k-1})` for `k >= 1`.
    #[inline]
    pub fn last_noise_increment(&self, i: usize) -> f64 {
        let d = self.dim;
        self.beta[self.k * d + i] - self.beta[(self.k - 1) * d + i]
    }
}

/// Basis for Markov feedback drifts: state monomials `{1, x_j, x_j^2}`
/// tensored with piecewise-linear hat functions in time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    #[serde(default = "yes")]
    pub constant: bool,
    #[serde(default = "yes")]
    pub linear: bool,
    #[serde(default)]
    pub quadratic: bool,
    /// Number of time knots; `0` or `1` means time-independent.
    #[serde(default)]
    pub time_knots: usize,
}

fn yes() -> bool {
    true
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            constant: true,
            linear: true,
            quadratic: false,
            time_knots: 0,
        }
    }
}

impl FeatureSpec {
    pub fn n_monomials(&self, dim: usize) -> usize {
        usize::from(self.constant) + dim * (usize::from(self.linear) + usize::from(self.quadratic))
    }

    pub fn n_time(&self) -> usize {
        self.time_knots.max(1)
    }

    pub fn n_features(&self, dim: usize) -> usize {
        self.n_monomials(dim) * self.n_time()
    }

    fn time_basis(&self, t: f64, out: &mut [f64]) {
        let kn = self.n_time();
        if kn == 1 {
            out[0] = 1.0;
            return;
        }
        let h = (kn - 1) as f64;
        for (j, o) in out.iter_mut().enumerate().take(kn) {
            *o = (1.0 - (t * h - j as f64).abs()).max(0.0);
        }
    }

    /// Feature vector at `(t, x)`; when `dx` is given it receives the
    /// row-major `n_features x dim` Jacobian of the features in `x`.
    pub fn eval(&self, t: f64, x: &[f64], phi: &mut [f64], mut dx: Option<&mut [f64]>) {
        let dim = x.len();
        let nt = self.n_time();
        let mut tb = [0.0f64; 64];
        let tb = if nt <= 64 {
            &mut tb[..nt]
        } else {
            unreachable!("time_knots capped at 64 by validation")
        };
        self.time_basis(t, tb);
        if let Some(d) = dx.as_deref_mut() {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut m = 0;
        let mut put = |value: f64, grad: Option<(usize, f64)>, m: &mut usize, dx: &mut Option<&mut [f64]>| {
            for (j, b) in tb.iter().enumerate() {
                let f = *m * nt + j;
                phi[f] = value * b;
                if let (Some(d), Some((coord, g))) = (dx.as_deref_mut(), grad) {
                    d[f * dim + coord] = g * b;
                }
            }
            *m += 1;
        };
        if self.constant {
            put(1.0, None, &mut m, &mut dx);
        }
        if self.linear {
            for (i, &xi) in x.iter().enumerate() {
                put(xi, Some((i, 1.0)), &mut m, &mut dx);
            }
        }
        if self.quadratic {
            for (i, &xi) in x.iter().enumerate() {
                put(xi * xi, Some((i, 2.0 * xi)), &mut m, &mut dx);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_knots > 64 {
            return Err(Error::InvalidArgument("time_knots must be <= 64".into()));
        }
        if !(self.constant || self.linear || self.quadratic) {
            return Err(Error::InvalidArgument("feature basis is empty".into()));
        }
        Ok(())
    }
}

/// `u̇_i(t, x) = clip(Σ_f θ_{i,f} φ_f(t, x), ±clip)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackPolicy {
    #[serde(default)]
    pub features: FeatureSpec,
    /// Row-major `dim x n_features`.
    pub weights: Vec<f64>,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_clip() -> f64 {
    10.0
}

impl FeedbackPolicy {
    pub fn zeros(features: FeatureSpec, dim: usize, clip: f64) -> Self {
        let n = features.n_features(dim) * dim;
        Self {
            features,
            weights: vec![0.0; n],
            clip,
        }
    }

    pub fn dim(&self) -> usize {
        // weights.len() = dim * n_mono(dim) * n_time; solve for dim.
        (1..=64)
            .find(|&d| self.features.n_features(d) * d == self.weights.len())
            .unwrap_or(0)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        self.features.validate()?;
        let expected = self.features.n_features(dim) * dim;
        if self.weights.len() != expected {
            return Err(Error::Mismatch {
                what: "feedback weights",
                expected,
                found: self.weights.len(),
            });
        }
        if !(self.clip > 0.0) {
            return Err(Error::InvalidArgument("clip bound must be positive".into()));
        }
        Ok(())
    }

    /// Unclipped linear output.
    pub fn raw(&self, t: f64, x: &[f64], phi: &mut [f64], out: &mut [f64]) {
        let nf = phi.len();
        self.features.eval(t, x, phi, None);
        for (i, o) in out.iter_mut().enumerate() {
            let w = &self.weights[i * nf..(i + 1) * nf];
            *o = w.iter().zip(phi.iter()).map(|(a, b)| a * b).sum();
        }
    }
}

/// An adapted drift rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftPolicy {
    Zero,
    /// `u̇ ≡ value`.
    Constant { value: Vec<f64> },
    /// Explicit per-step density, `n_steps * dim` row-major.
    Deterministic { dot: Vec<f64> },
    /// Markov feedback on the observed state.
    Feedback(FeedbackPolicy),
    /// Output at step `k` is the inner output at step `k - steps`.
    Delayed { steps: usize, inner: Box<DriftPolicy> },
    Clipped { bound: f64, inner: Box<DriftPolicy> },
    /// Zero from the first step where the inner energy `Σ|u̇|² dt` would exceed `budget`.
    EnergyStopped { budget: f64, inner: Box<DriftPolicy> },
    /// Zero before the stopping time, inner output from it on.
    VanishBefore { tau: StoppingRule, inner: Box<DriftPolicy> },
    /// Zero from the first node where the inner Wick exponential reaches `level`.
    LevelStopped { level: f64, inner: Box<DriftPolicy> },
    /// Drift whose Wick exponential follows `(M + a) / (1 + a)`, `M` the inner one.
    Mixed { a: f64, inner: Box<DriftPolicy> },
}

/// How a policy's shift is known to be invertible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invertibility {
    Deterministic,
    Retarded,
    /// Lipschitz feedback on the current state of `W^u`; inverted by
    /// subtracting the drift evaluated on the observed path.
    MarkovFeedback,
    /// Depends on the driving noise through a density; needs an explicit certificate.
    Uncertified,
}

impl DriftPolicy {
    pub fn constant(value: &[f64]) -> Self {
        DriftPolicy::Constant {
            value: value.to_vec(),
        }
    }

    pub fn delayed(self, steps: usize) -> Self {
        DriftPolicy::Delayed {
            steps,
            inner: Box::new(self),
        }
    }

    pub fn clipped(self, bound: f64) -> Self {
        DriftPolicy::Clipped {
            bound,
            inner: Box::new(self),
        }
    }

    pub fn vanish_before(self, tau: StoppingRule) -> Self {
        DriftPolicy::VanishBefore {
            tau,
            inner: Box::new(self),
        }
    }

    pub fn energy_stopped(self, budget: f64) -> Self {
        DriftPolicy::EnergyStopped {
            budget,
            inner: Box::new(self),
        }
    }

    pub fn level_stopped(self, level: f64) -> Self {
        DriftPolicy::LevelStopped {
            level,
            inner: Box::new(self),
        }
    }

    pub fn mixed(self, a: f64) -> Self {
        DriftPolicy::Mixed {
            a,
            inner: Box::new(self),
        }
    }

    fn inner(&self) -> Option<&DriftPolicy> {
        match self {
            DriftPolicy::Delayed { inner, .. }
            | DriftPolicy::Clipped { inner, .. }
            | DriftPolicy::EnergyStopped { inner, .. }
            | DriftPolicy::VanishBefore { inner, .. }
            | DriftPolicy::LevelStopped { inner, .. }
            | DriftPolicy::Mixed { inner, .. } => Some(inner),
            _ => None,
        }
    }

    /// True when the output never depends on the observed path.
    pub fn is_deterministic(&self) -> bool {
        match self {
            DriftPolicy::Zero | DriftPolicy::Constant { .. } | DriftPolicy::Deterministic { .. } => true,
            DriftPolicy::Feedback(_) => false,
            DriftPolicy::VanishBefore { tau, inner } => {
                matches!(tau, StoppingRule::Deterministic { .. }) && inner.is_deterministic()
            }
            DriftPolicy::LevelStopped { .. } | DriftPolicy::Mixed { .. } => false,
            other => other.inner().is_none_or(|p| p.is_deterministic()),
        }
    }

    /// Invertibility class of the closed-loop shift `W ↦ W^u`.
    pub fn invertibility(&self) -> Invertibility {
        if self.is_deterministic() {
            return Invertibility::Deterministic;
        }
        match self {
            DriftPolicy::Delayed { steps, .. } if *steps >= 1 => Invertibility::Retarded,
            DriftPolicy::Feedback(_) => Invertibility::MarkovFeedback,
            DriftPolicy::VanishBefore {
                tau: StoppingRule::FirstLevelHit { .. },
                ..
            } => Invertibility::Uncertified,
            DriftPolicy::Delayed { inner, .. }
            | DriftPolicy::Clipped { inner, .. }
            | DriftPolicy::EnergyStopped { inner, .. }
            | DriftPolicy::VanishBefore { inner, .. } => match inner.invertibility() {
                Invertibility::Deterministic => Invertibility::MarkovFeedback,
                other => other,
            },
            _ => Invertibility::Uncertified,
        }
    }

    pub fn validate(&self, grid: &TimeGrid, dim: usize) -> Result<()> {
        match self {
            DriftPolicy::Zero => Ok(()),
            DriftPolicy::Constant { value } => {
                if value.len() != dim {
                    return Err(Error::Mismatch {
                        what: "constant drift dimension",
                        expected: dim,
                        found: value.len(),
                    });
                }
                finite_all(value)
            }
            DriftPolicy::Deterministic { dot } => {
                if dot.len() != grid.n_steps() * dim {
                    return Err(Error::Mismatch {
                        what: "deterministic drift length",
                        expected: grid.n_steps() * dim,
                        found: dot.len(),
                    });
                }
                finite_all(dot)
            }
            DriftPolicy::Feedback(p) => p.validate(dim),
            DriftPolicy::Delayed { inner, .. } => inner.validate(grid, dim),
            DriftPolicy::Clipped { bound, inner } => {
                positive("clip bound", *bound)?;
                inner.validate(grid, dim)
            }
            DriftPolicy::EnergyStopped { budget, inner } => {
                positive("energy budget", *budget)?;
                inner.validate(grid, dim)
            }
            DriftPolicy::VanishBefore { tau, inner } => {
                tau.validate()?;
                inner.validate(grid, dim)
            }
            DriftPolicy::LevelStopped { level, inner } => {
                positive("level", *level)?;
                inner.validate(grid, dim)
            }
            DriftPolicy::Mixed { a, inner } => {
                if !(0.0..=1.0).contains(a) {
                    return Err(Error::InvalidArgument(format!("mixing constant {a} outside [0, 1]")));
                }
                inner.validate(grid, dim)
            }
        }
    }

    /// Fresh per-path evaluator.
    pub fn start<'p>(&'p self, grid: &TimeGrid, dim: usize) -> Box<dyn StepDrift + 'p> {
        let n = grid.n_steps();
        match self {
            DriftPolicy::Zero => Box::new(ZeroEval),
            DriftPolicy::Constant { value } => Box::new(ConstEval(value)),
            DriftPolicy::Deterministic { dot } => Box::new(DetEval(dot)),
            DriftPolicy::Feedback(p) => Box::new(FeedbackEval {
                policy: p,
                phi: vec![0.0; p.features.n_features(dim)],
            }),
            DriftPolicy::Delayed { steps, inner } => Box::new(DelayedEval {
                steps: *steps,
                inner: inner.start(grid, dim),
                history: Vec::with_capacity(n * dim),
            }),
            DriftPolicy::Clipped { bound, inner } => Box::new(ClipEval {
                bound: *bound,
                inner: inner.start(grid, dim),
            }),
            DriftPolicy::EnergyStopped { budget, inner } => Box::new(EnergyEval {
                budget: *budget,
                used: 0.0,
                stopped: false,
                inner: inner.start(grid, dim),
            }),
            DriftPolicy::VanishBefore { tau, inner } => Box::new(VanishEval {
                tau,
                active: false,
                inner: inner.start(grid, dim),
            }),
            DriftPolicy::LevelStopped { level, inner } => Box::new(LevelEval {
                log_level: level.ln(),
                tracker: WickTracker::new(dim),
                stopped: false,
                inner: inner.start(grid, dim),
            }),
            DriftPolicy::Mixed { a, inner } => Box::new(MixEval {
                a: *a,
                tracker: WickTracker::new(dim),
                inner: inner.start(grid, dim),
            }),
        }
    }
}

fn finite_all(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Policy("non-finite drift parameter".into()))
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be positive, got {v}")))
    }
}

/// Per-path, stateful drift evaluation. Must be called once per step, in order.
pub trait StepDrift {
    fn next(&mut self, ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()>;
}

struct ZeroEval;
impl StepDrift for ZeroEval {
    fn next(&mut self, _: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

struct ConstEval<'p>(&'p [f64]);
impl StepDrift for ConstEval<'_> {
    fn next(&mut self, _: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(self.0);
        Ok(())
    }
}

struct DetEval<'p>(&'p [f64]);
impl StepDrift for DetEval<'_> {
    fn next(&mut self, ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        let d = ctx.dim;
        out.copy_from_slice(&self.0[ctx.k * d..(ctx.k + 1) * d]);
        Ok(())
    }
}

struct FeedbackEval<'p> {
    policy: &'p FeedbackPolicy,
    phi: Vec<f64>,
}
impl StepDrift for FeedbackEval<'_> {
    fn next(&mut self, ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        self.policy.raw(ctx.t(), ctx.state(), &mut self.phi, out);
        let m = self.policy.clip;
        for o in out.iter_mut() {
            if !o.is_finite() {
                return Err(Error::Policy(format!("feedback drift not finite at step {}", ctx.k)));
            }
            *o = o.clamp(-m, m);
        }
        Ok(())
    }
}

struct DelayedEval<'p> {
    steps: usize,
    inner: Box<dyn StepDrift + 'p>,
    history: Vec<f64>,
}
impl StepDrift for DelayedEval<'_> {
    fn next(&mut self, ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        let d = ctx.dim;
        self.inner.next(ctx, out)?;
        self.history.extend_from_slice(out);
        if ctx.k >= self.steps {
            let j = ctx.k - self.steps;
            out.copy_from_slice(&self.history[j * d..(j + 1) * d]);
        } else {
            out.fill(0.0);
        }
        Ok(())
    }
}

struct ClipEval<'p> {
    bound: f64,
    inner: Box<dyn StepDrift + 'p>,
}
impl StepDrift for ClipEval<'_> {
    fn next(&mut self, ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        self.inner.next(ctx, out)?;
        out.iter_mut().for_each(|o| *o = o.clamp(-self.bound, self.bound));
        Ok(())
    }
}

struct EnergyEval<'p> {
    budget: f64,
    used: f64,
    stopped: bool,
    inner: Box<dyn StepDrift + 'p>,
}
impl StepDrift for EnergyEval<'_> {
    fn next(&mut self, ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        self.inner.next(ctx, out)?;
        if !self.stopped {
            let e = out.iter().map(|v| v * v).sum::<f64>() * ctx.grid.dt();
            if self.used + e > self.budget {
                self.stopped = true;
            } else {
                self.used += e;
            }
        }
        if self.stopped {
            out.fill(0.0);
        }
        Ok(())
    }
}

struct VanishEval<'p> {
    tau: &'p StoppingRule,
    active: bool,
    inner: Box<dyn StepDrift + 'p>,
}
impl StepDrift for VanishEval<'_> {
    fn next(&mut self, ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        self.inner.next(ctx, out)?;
        if !self.active {
            self.active = self.tau.triggered(ctx);
        }
        if !self.active {
            out.fill(0.0);
        }
        Ok(())
    }
}

/// Running `log ρ(-δ_β π_t v)` of a drift sequence observed step by step.
struct WickTracker {
    log_m: f64,
    prev: Vec<f64>,
    primed: bool,
}

impl WickTracker {
    fn new(dim: usize) -> Self {
        Self {
            log_m: 0.0,
            prev: vec![0.0; dim],
            primed: false,
        }
    }

    /// Folds in the previous step's drift against `Δβ_{k-1}`; returns `log M(t_k)`.
    fn advance(&mut self, ctx: &StepContext<'_>) -> f64 {
        if self.primed && ctx.k >= 1 {
            let dt = ctx.grid.dt();
            for i in 0..ctx.dim {
                let v = self.prev[i];
                self.log_m += -v * ctx.last_noise_increment(i) - 0.5 * v * v * dt;
            }
        }
        self.log_m
    }

    fn record(&mut self, drift: &[f64]) {
        self.prev.copy_from_slice(drift);
        self.primed = true;
    }
}

struct LevelEval<'p> {
    log_level: f64,
    tracker: WickTracker,
    stopped: bool,
    inner: Box<dyn StepDrift + 'p>,
}
impl StepDrift for LevelEval<'_> {
    fn next(&mut self, ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        let log_m = self.tracker.advance(ctx);
        self.inner.next(ctx, out)?;
        self.tracker.record(out);
        if !self.stopped && log_m >= self.log_level {
            self.stopped = true;
        }
        if self.stopped {
            out.fill(0.0);
        }
        Ok(())
    }
}

struct MixEval<'p> {
    a: f64,
    tracker: WickTracker,
    inner: Box<dyn StepDrift + 'p>,
}
impl StepDrift for MixEval<'_> {
    fn next(&mut self, ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        let log_m = self.tracker.advance(ctx);
        self.inner.next(ctx, out)?;
        self.tracker.record(out);
        // M / (M + a) = 1 / (1 + a e^{-log M})
        let factor = if self.a == 0.0 {
            1.0
        } else {
            1.0 / (1.0 + self.a * (-log_m).exp())
        };
        out.iter_mut().for_each(|o| *o *= factor);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_engine::make_grid;

    /// Drives a policy along a fixed path, returning the drift rows.
    fn drive(policy: &DriftPolicy, grid: TimeGrid, path: &[f64], beta: &[f64]) -> Vec<f64> {
        let mut ev = policy.start(&grid, 1);
        let mut out = vec![0.0; grid.n_steps()];
        for k in 0..grid.n_steps() {
            let ctx = StepContext {
                grid: &grid,
                k,
                dim: 1,
                path,
                beta,
                log_density: 0.0,
            };
            ev.next(&ctx, &mut out[k..k + 1]).unwrap();
        }
        out
    }

    #[test]
    fn delay_by_one_step() {
        let g = make_grid(4).unwrap();
        let z = vec![0.0; 5];
        let p = DriftPolicy::constant(&[1.0]).delayed(1);
        assert_eq!(drive(&p, g, &z, &z), vec![0.0, 1.0, 1.0, 1.0]);
        let full = DriftPolicy::constant(&[1.0]).delayed(4);
        assert_eq!(drive(&full, g, &z, &z), vec![0.0; 4]);
    }

    #[test]
    fn double_delay_composes() {
        let g = make_grid(8).unwrap();
        let path: Vec<f64> = (0..9).map(|k| (k as f64).sin()).collect();
        let fb = DriftPolicy::Feedback(FeedbackPolicy {
            features: FeatureSpec::default(),
            weights: vec![0.3, -1.2],
            clip: 10.0,
        });
        let twice = fb.clone().delayed(2).delayed(3);
        let once = fb.delayed(5);
        assert_eq!(drive(&twice, g, &path, &path), drive(&once, g, &path, &path));
    }

    #[test]
    fn clip_and_vanish() {
        let g = make_grid(4).unwrap();
        let z = vec![0.0; 5];
        let p = DriftPolicy::constant(&[5.0])
            .clipped(2.0)
            .vanish_before(StoppingRule::Deterministic { t: 0.5 });
        assert_eq!(drive(&p, g, &z, &z), vec![0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn energy_budget_is_respected() {
        let g = make_grid(4).unwrap();
        let z = vec![0.0; 5];
        // Each step carries energy 4 * 0.25 = 1.
        let p = DriftPolicy::constant(&[2.0]).energy_stopped(2.5);
        assert_eq!(drive(&p, g, &z, &z), vec![2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn level_stop_at_unit_level_is_immediate() {
        let g = make_grid(4).unwrap();
        let z = vec![0.0; 5];
        let p = DriftPolicy::constant(&[1.0]).level_stopped(1.0);
        assert_eq!(drive(&p, g, &z, &z), vec![0.0; 4]);
    }

    #[test]
    fn level_stop_tracks_wick_exponential() {
        // v̇ ≡ -1 with β(t) = 4t: log M(t_k) = β(t_k) - t_k/2 = 3.5 t_k.
        let g = make_grid(4).unwrap();
        let beta: Vec<f64> = (0..5).map(|k| k as f64).collect();
        let p = DriftPolicy::constant(&[-1.0]).level_stopped((3.5f64 * 0.5).exp() - 1e-12);
        assert_eq!(drive(&p, g, &beta, &beta), vec![-1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn mixing_shrinks_the_drift() {
        let g = make_grid(4).unwrap();
        let z = vec![0.0; 5];
        // β ≡ 0, v̇ ≡ 1: log M(t_k) = -t_k/2.
        let out = drive(&DriftPolicy::constant(&[1.0]).mixed(0.5), g, &z, &z);
        for (k, o) in out.iter().enumerate() {
            let m = (-(k as f64) * 0.25 / 2.0).exp();
            assert!((o - m / (m + 0.5)).abs() < 1e-14);
        }
        assert_eq!(drive(&DriftPolicy::constant(&[1.0]).mixed(0.0), g, &z, &z), vec![1.0; 4]);
    }

    #[test]
    fn feature_jacobian_matches_differences() {
        let spec = FeatureSpec {
            constant: true,
            linear: true,
            quadratic: true,
            time_knots: 3,
        };
        let x = [0.7, -0.3];
        let nf = spec.n_features(2);
        let mut phi = vec![0.0; nf];
        let mut jac = vec![0.0; nf * 2];
        spec.eval(0.3, &x, &mut phi, Some(&mut jac));
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += 1e-6;
            xm[j] -= 1e-6;
            let mut pp = vec![0.0; nf];
            let mut pm = vec![0.0; nf];
            spec.eval(0.3, &xp, &mut pp, None);
            spec.eval(0.3, &xm, &mut pm, None);
            for f in 0..nf {
                let fd = (pp[f] - pm[f]) / 2e-6;
                assert!((fd - jac[f * 2 + j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn invertibility_labels() {
        let fb = DriftPolicy::Feedback(FeedbackPolicy::zeros(FeatureSpec::default(), 1, 3.0));
        assert_eq!(DriftPolicy::constant(&[1.0]).invertibility(), Invertibility::Deterministic);
        assert_eq!(fb.clone().delayed(2).clipped(1.0).invertibility(), Invertibility::Retarded);
        assert_eq!(fb.clone().invertibility(), Invertibility::MarkovFeedback);
        assert_eq!(fb.mixed(0.1).invertibility(), Invertibility::Uncertified);
    }

    #[test]
    fn policies_roundtrip_through_toml() {
        let p = DriftPolicy::Feedback(FeedbackPolicy::zeros(FeatureSpec::default(), 1, 3.0))
            .delayed(2)
            .vanish_before(StoppingRule::Deterministic { t: 0.5 });
        let s = toml::to_string(&p).unwrap();
        let back: DriftPolicy = toml::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}

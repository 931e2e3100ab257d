//! Stochastic optimization of Markov feedback drifts.
//!
//! The cost `f(X) + ½ Σ |u_k|^2 dt` of the closed-loop Euler scheme
//! `X_{k+1} = X_k + b(X_k) dt + σ(X_k)(Δβ_k + u_k dt)`, `u_k = clip(θ φ(t_k, X_k))`,
//! is differentiated in `θ` by a backward (adjoint) sweep on each path.

use serde::{Deserialize, Serialize};

use crate::conditioning::StoppingRule;
use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::models::{MeasureModel, Model};
use crate::path_engine::{draw_increments, SamplePath, StreamBlock, TimeGrid};
use crate::policy::{DriftPolicy, FeatureSpec, FeedbackPolicy};
use crate::stats::{batch_means, mean_se, par_map, Estimate, DEFAULT_BATCHES};

/// Parametric family searched by the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyTemplate {
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_clip() -> f64 {
    10.0
}

impl Default for PolicyTemplate {
    fn default() -> Self {
        Self {
            features: FeatureSpec::default(),
            clip: default_clip(),
        }
    }
}

impl PolicyTemplate {
    pub fn n_params(&self, dim: usize) -> usize {
        self.features.n_features(dim) * dim
    }

    /// The drift with weights `theta`, vanishing before `tau`.
    pub fn policy(&self, theta: &[f64], tau: &StoppingRule) -> DriftPolicy {
        let fb = DriftPolicy::Feedback(FeedbackPolicy {
            features: self.features.clone(),
            weights: theta.to_vec(),
            clip: self.clip,
        });
        if tau.is_degenerate() {
            fb
        } else {
            fb.vanish_before(tau.clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub validation_paths: usize,
    pub validate_every: usize,
    pub max_retries: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 500,
            batch_size: 1024,
            validation_paths: 100_000,
            validate_every: 25,
            max_retries: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub j: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub theta: Vec<f64>,
    pub policy: DriftPolicy,
    /// Validation estimate of `J` at the returned iterate.
    pub best: Estimate,
    pub best_iter: usize,
    /// Minibatch objective per iteration.
    pub trace: Vec<TraceRow>,
    pub validation: Vec<TraceRow>,
    pub learning_rate: f64,
    pub retries: usize,
}

/// Diagonal Euler dynamics shared by the forward and backward sweeps.
#[derive(Clone, Debug)]
enum Dynamics {
    Wiener,
    Diffusion {
        scale: Vec<f64>,
        amp: f64,
        drift: Vec<f64>,
        kappa: f64,
    },
}

impl Dynamics {
    fn of(model: &Model) -> Result<Self> {
        match model.spec() {
            MeasureModel::Wiener { .. } => Ok(Dynamics::Wiener),
            MeasureModel::Diffusion {
                scale,
                amp,
                drift,
                kappa,
                ..
            } => Ok(Dynamics::Diffusion {
                scale: scale.clone(),
                amp: *amp,
                drift: drift.clone(),
                kappa: *kappa,
            }),
            other => Err(Error::Unsupported(format!(
                "pathwise gradients for the {} family",
                other.family()
            ))),
        }
    }

    /// `(b_i, b_i', σ_i, σ_i')` at coordinate value `x`.
    #[inline]
    fn coeffs(&self, i: usize, x: f64) -> (f64, f64, f64, f64) {
        match self {
            Dynamics::Wiener => (0.0, 0.0, 1.0, 0.0),
            Dynamics::Diffusion {
                scale,
                amp,
                drift,
                kappa,
            } => {
                let th = x.tanh();
                let dth = 1.0 - th * th;
                (
                    drift[i] - kappa * th,
                    -kappa * dth,
                    scale[i] * (1.0 + amp * th),
                    scale[i] * amp * dth,
                )
            }
        }
    }
}

fn check_tau(tau: &StoppingRule) -> Result<()> {
    match tau {
        StoppingRule::FirstLevelHit { .. } => Err(Error::Unsupported(
            "level-hit stopping inside the optimizer".into(),
        )),
        _ => tau.validate(),
    }
}

struct Problem<'a> {
    dyn_: Dynamics,
    start: Vec<f64>,
    f: &'a Functional,
    template: &'a PolicyTemplate,
    tau: &'a StoppingRule,
    grid: TimeGrid,
    dim: usize,
    nf: usize,
}

impl<'a> Problem<'a> {
    fn new(
        model: &Model,
        f: &'a Functional,
        template: &'a PolicyTemplate,
        tau: &'a StoppingRule,
        grid: TimeGrid,
    ) -> Result<Self> {
        check_tau(tau)?;
        template.features.validate()?;
        f.validate(model.dim())?;
        Ok(Self {
            dyn_: Dynamics::of(model)?,
            start: model.start(),
            f,
            template,
            tau,
            grid,
            dim: model.dim(),
            nf: template.features.n_features(model.dim()),
        })
    }

    fn tau_index(&self) -> Option<usize> {
        match self.tau {
            StoppingRule::Deterministic { t } => Some(self.grid.index_at_or_after(*t)),
            _ => None,
        }
    }

    fn is_active(&self, k: usize, x: &[f64], active: bool) -> bool {
        if active {
            return true;
        }
        match (self.tau, self.tau_index()) {
            (_, Some(ki)) => k >= ki,
            (StoppingRule::FirstExit { radius }, None) => {
                x.iter().map(|v| v * v).sum::<f64>().sqrt() >= *radius
            }
            _ => false,
        }
    }

    /// Cost of one path; with `grad`, also adds `∂cost/∂θ`.
    fn path(&self, theta: &[f64], block: StreamBlock, i: usize, grad: Option<&mut [f64]>) -> f64 {
        let (d, nf, n) = (self.dim, self.nf, self.grid.n_steps());
        let dt = self.grid.dt();
        let dbeta = draw_increments(&mut block.stream(i).rng(), self.grid, d);
        let mut xs = vec![0.0; (n + 1) * d];
        xs[..d].copy_from_slice(&self.start);
        let mut us = vec![0.0; n * d];
        let mut live = vec![false; n * d];
        let mut phi = vec![0.0; nf];
        let mut active = false;
        let mut energy = 0.0;
        for k in 0..n {
            let (cur, next) = xs.split_at_mut((k + 1) * d);
            let x = &cur[k * d..];
            active = self.is_active(k, x, active);
            if active {
                self.template.features.eval(self.grid.t(k), x, &mut phi, None);
                for r in 0..d {
                    let raw: f64 = theta[r * nf..(r + 1) * nf].iter().zip(&phi).map(|(a, b)| a * b).sum();
                    let c = self.template.clip;
                    us[k * d + r] = raw.clamp(-c, c);
                    live[k * d + r] = raw.abs() < c;
                }
            }
            for r in 0..d {
                let u = us[k * d + r];
                energy += 0.5 * u * u * dt;
                let (b, _, s, _) = self.dyn_.coeffs(r, x[r]);
                next[r] = x[r] + b * dt + s * (dbeta[k * d + r] + u * dt);
            }
        }
        let path = SamplePath {
            grid: self.grid,
            dim: d,
            values: xs,
        };
        let cost = self.f.value(&path) + energy;
        let Some(grad) = grad else {
            return cost;
        };

        let mut gx = vec![0.0; (n + 1) * d];
        self.f.add_gradient(&path, &mut gx);
        let mut lam = gx[n * d..].to_vec();
        let mut jac = vec![0.0; nf * d];
        let mut gu = vec![0.0; d];
        let mut next_lam = vec![0.0; d];
        for k in (0..n).rev() {
            let x = &path.values[k * d..(k + 1) * d];
            let any_live = live[k * d..(k + 1) * d].iter().any(|l| *l);
            if any_live {
                self.template.features.eval(self.grid.t(k), x, &mut phi, Some(&mut jac));
            }
            for r in 0..d {
                let u = us[k * d + r];
                let (_, db, s, ds) = self.dyn_.coeffs(r, x[r]);
                gu[r] = u * dt + lam[r] * s * dt;
                next_lam[r] = gx[k * d + r] + lam[r] * (1.0 + db * dt + ds * (dbeta[k * d + r] + u * dt));
            }
            if any_live {
                for r in 0..d {
                    if !live[k * d + r] {
                        continue;
                    }
                    let w = &theta[r * nf..(r + 1) * nf];
                    for fi in 0..nf {
                        grad[r * nf + fi] += gu[r] * phi[fi];
                    }
                    for j in 0..d {
                        let du: f64 = (0..nf).map(|fi| w[fi] * jac[fi * d + j]).sum();
                        next_lam[j] += gu[r] * du;
                    }
                }
            }
            lam.copy_from_slice(&next_lam);
        }
        cost
    }

    fn batch(&self, theta: &[f64], block: StreamBlock, n: usize) -> (Vec<f64>, Vec<f64>) {
        let p = theta.len();
        let rows = par_map(n, |i| {
            let mut g = vec![0.0; p];
            let c = self.path(theta, block, i, Some(&mut g));
            (c, g)
        });
        let mut grad = vec![0.0; p];
        let mut costs = Vec::with_capacity(n);
        for (c, g) in rows {
            costs.push(c);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n as f64);
        (costs, grad)
    }

    fn value(&self, theta: &[f64], block: StreamBlock, n: usize) -> Estimate {
        let costs = par_map(n, |i| self.path(theta, block, i, None));
        batch_means(&costs, DEFAULT_BATCHES)
    }
}

/// Sample mean of the cost and its exact gradient in `θ` on `n_paths` paths.
#[allow(clippy::too_many_arguments)]
pub fn pathwise_gradient(
    model: &Model,
    f: &Functional,
    template: &PolicyTemplate,
    theta: &[f64],
    tau: &StoppingRule,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
) -> Result<(f64, Vec<f64>)> {
    let pb = Problem::new(model, f, template, tau, grid)?;
    check_len(theta, template.n_params(pb.dim))?;
    let (costs, grad) = pb.batch(theta, block, n_paths);
    Ok((costs.iter().sum::<f64>() / n_paths as f64, grad))
}

/// Central differences of the same sample mean, at the given coordinates.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_gradient(
    model: &Model,
    f: &Functional,
    template: &PolicyTemplate,
    theta: &[f64],
    tau: &StoppingRule,
    grid: TimeGrid,
    block: StreamBlock,
    n_paths: usize,
    coords: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    let pb = Problem::new(model, f, template, tau, grid)?;
    check_len(theta, template.n_params(pb.dim))?;
    let avg = |th: &[f64]| par_map(n_paths, |i| pb.path(th, block, i, None)).iter().sum::<f64>() / n_paths as f64;
    Ok(coords
        .iter()
        .map(|&c| {
            let mut p = theta.to_vec();
            let mut m = theta.to_vec();
            p[c] += step;
            m[c] -= step;
            (avg(&p) - avg(&m)) / (2.0 * step)
        })
        .collect())
}

fn check_len(theta: &[f64], n: usize) -> Result<()> {
    if theta.len() != n {
        return Err(Error::Mismatch {
            what: "parameter count",
            expected: n,
            found: theta.len(),
        });
    }
    Ok(())
}

/// Adam on fresh minibatches; the iterate with the best validation value
/// (fixed validation paths) is returned.
#[allow(clippy::too_many_arguments)]
pub fn optimize(
    model: &Model,
    f: &Functional,
    template: &PolicyTemplate,
    tau: &StoppingRule,
    config: &OptimizerConfig,
    grid: TimeGrid,
    block: StreamBlock,
) -> Result<OptimizeResult> {
    let pb = Problem::new(model, f, template, tau, grid)?;
    if config.iterations == 0 || config.batch_size < 2 || config.validation_paths < 2 {
        return Err(Error::InvalidArgument("optimizer needs iterations, batches and validation paths".into()));
    }
    let p = template.n_params(pb.dim);
    let train = block.purpose(0);
    let valid = block.purpose(1);
    let every = config.validate_every.max(1);

    let mut lr = config.learning_rate;
    let mut retries = 0;
    'attempt: loop {
        let mut theta = vec![0.0; p];
        let mut m = vec![0.0; p];
        let mut v = vec![0.0; p];
        let mut trace = Vec::with_capacity(config.iterations);
        let mut validation = Vec::new();
        let mut best = pb.value(&theta, valid, config.validation_paths);
        let mut best_theta = theta.clone();
        let mut best_iter = 0;
        validation.push(TraceRow {
            iter: 0,
            j: best.mean,
            se: best.se,
        });
        for it in 1..=config.iterations {
            let sub = StreamBlock::new(train.seed, train.base + ((it as u64) << 20));
            let (costs, grad) = pb.batch(&theta, sub, config.batch_size);
            let e = mean_se(&costs);
            if !e.mean.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                retries += 1;
                if retries > config.max_retries {
                    return Err(Error::Numerical(format!(
                        "optimizer diverged at iteration {it} after {} step-size halvings",
                        config.max_retries
                    )));
                }
                lr *= 0.5;
                continue 'attempt;
            }
            trace.push(TraceRow {
                iter: it,
                j: e.mean,
                se: e.se,
            });
            let b1t = 1.0 - config.beta1.powi(it as i32);
            let b2t = 1.0 - config.beta2.powi(it as i32);
            for j in 0..p {
                m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * grad[j];
                v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * grad[j] * grad[j];
                theta[j] -= lr * (m[j] / b1t) / ((v[j] / b2t).sqrt() + config.epsilon);
            }
            if it % every == 0 || it == config.iterations {
                let val = pb.value(&theta, valid, config.validation_paths);
                if !val.mean.is_finite() {
                    retries += 1;
                    if retries > config.max_retries {
                        return Err(Error::Numerical("validation objective diverged".into()));
                    }
                    lr *= 0.5;
                    continue 'attempt;
                }
                validation.push(TraceRow {
                    iter: it,
                    j: val.mean,
                    se: val.se,
                });
                if val.mean < best.mean {
                    best = val;
                    best_theta = theta.clone();
                    best_iter = it;
                }
            }
        }
        return Ok(OptimizeResult {
            policy: template.policy(&best_theta, tau),
            theta: best_theta,
            best,
            best_iter,
            trace,
            validation,
            learning_rate: lr,
            retries,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_engine::make_grid;
    use crate::stats::try_par_map;

    /// Cost samples of a template policy through the generic closed-loop
    /// simulator; used to cross-check the optimizer's own forward sweep.
    fn simulated_costs(
        model: &Model,
        f: &Functional,
        policy: &DriftPolicy,
        grid: TimeGrid,
        block: StreamBlock,
        n_paths: usize,
    ) -> Result<Vec<f64>> {
        try_par_map(n_paths, |i| {
            let p = model.apply_shift(&block.stream(i), grid, policy)?;
            Ok(f.value(&p.w_path) + p.half_energy())
        })
    }

    fn setup() -> (Model, TimeGrid) {
        (Model::new(MeasureModel::Wiener { dim: 1 }).unwrap(), make_grid(32).unwrap())
    }

    #[test]
    fn forward_sweep_matches_simulator() {
        let (m, g) = setup();
        let t = PolicyTemplate {
            features: FeatureSpec {
                constant: true,
                linear: true,
                quadratic: true,
                time_knots: 3,
            },
            clip: 1.5,
        };
        let theta: Vec<f64> = (0..t.n_params(1)).map(|i| 0.3 * (i as f64).sin()).collect();
        let f = Functional::TerminalQuadratic {
            scale: 1.0,
            center: vec![],
        };
        let tau = StoppingRule::Deterministic { t: 0.25 };
        let block = StreamBlock::new(9, 0);
        let pb = Problem::new(&m, &f, &t, &tau, g).unwrap();
        let sim = simulated_costs(&m, &f, &t.policy(&theta, &tau), g, block, 50).unwrap();
        for (i, c) in sim.iter().enumerate() {
            assert!((pb.path(&theta, block, i, None) - c).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_differences_on_diffusion() {
        let m = Model::new(MeasureModel::Diffusion {
            scale: vec![1.0, 0.8],
            amp: 0.2,
            drift: vec![0.1, 0.0],
            kappa: 0.3,
            start: vec![0.2, -0.1],
        })
        .unwrap();
        let g = make_grid(16).unwrap();
        let t = PolicyTemplate {
            features: FeatureSpec {
                constant: true,
                linear: true,
                quadratic: true,
                time_knots: 2,
            },
            clip: 50.0,
        };
        let theta: Vec<f64> = (0..t.n_params(2)).map(|i| 0.2 * (1.0 + i as f64).cos()).collect();
        let f = Functional::Sum {
            terms: vec![
                Functional::TerminalCosine { amp: 1.0, freq: 1.3 },
                Functional::IntegralQuadratic { scale: 0.5 },
            ],
        };
        let tau = StoppingRule::degenerate();
        let block = StreamBlock::new(5, 0);
        let (_, grad) = pathwise_gradient(&m, &f, &t, &theta, &tau, g, block, 200).unwrap();
        let coords: Vec<usize> = (0..theta.len()).collect();
        let fd = finite_difference_gradient(&m, &f, &t, &theta, &tau, g, block, 200, &coords, 1e-5).unwrap();
        for (a, b) in grad.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

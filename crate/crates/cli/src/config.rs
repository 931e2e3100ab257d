use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pathvar::conditioning::StoppingRule;
use pathvar::functional::Functional;
use pathvar::models::{MeasureModel, Model};
use pathvar::path_engine::{make_grid, TimeGrid};
use pathvar::pipeline::PipelineSpec;
use pathvar::policy::DriftPolicy;
use pathvar::prekopa::{quadratic_family, shifted_quadratic, PLInstance};
use pathvar::variational::{OptimizerConfig, PolicyTemplate};
use pathvar::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridBlock,
    pub model: MeasureModel,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(rename = "experiment", default)]
    pub experiments: Vec<ExperimentEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Variational,
    Entropy,
    Pipeline,
    Prekopa,
    Conditions,
}

impl Kind {
    /// Metric names an experiment of this kind may produce.
    pub fn metrics(self) -> &'static [&'static str] {
        match self {
            Kind::Variational => &["direct", "j", "gap", "rel_gap", "worst_z", "best_iter", "retries"],
            Kind::Entropy => &[
                "entropy",
                "half_energy",
                "gap",
                "worst_cell_z",
                "certified",
                "oracle_entropy",
                "oracle_half_energy",
                "oracle_rel_diff",
                "oracle_quadrature_error",
                "oracle_invertible",
            ],
            Kind::Pipeline => &[
                "total",
                "stage_sum",
                "triangle_margin",
                "membership",
                "mix_lower_margin",
                "mix_upper_margin",
                "max_reconstruction_error",
            ],
            Kind::Prekopa => &["min_margin", "violations", "non_finite", "min_slack", "worst_slack_z", "convex"],
            Kind::Conditions => &["max_abs_z", "unit_passes", "vanishes", "noise_identity", "composition", "pre_tau"],
        }
    }
}

/// A declared tolerance on one metric.
///
/// With `target`: `|value - target| <= abs_tol + rel_tol |target| + se_mult se`.
/// With `min` / `max`: one-sided bounds widened by `abs_tol + se_mult se`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub metric: String,
    #[serde(default)]
    pub target: Option<f64>,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
    #[serde(default)]
    pub abs_tol: f64,
    #[serde(default)]
    pub rel_tol: f64,
    #[serde(default)]
    pub se_mult: f64,
}

impl Check {
    pub fn passes(&self, value: f64, se: f64) -> bool {
        if !value.is_finite() {
            return false;
        }
        let widen = self.abs_tol + self.se_mult * se;
        let mut ok = true;
        if let Some(t) = self.target {
            ok &= (value - t).abs() <= widen + self.rel_tol * t.abs();
        }
        if let Some(m) = self.min {
            ok &= value >= m - widen;
        }
        if let Some(m) = self.max {
            ok &= value <= m + widen;
        }
        ok
    }
}

fn default_bins() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentEntry {
    pub name: String,
    pub kind: Kind,
    #[serde(default)]
    pub model: Option<MeasureModel>,
    #[serde(default)]
    pub n_paths: Option<usize>,
    #[serde(default)]
    pub tau: Option<StoppingRule>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "empty_table")]
    pub params: toml::Table,
    #[serde(default, rename = "check")]
    pub checks: Vec<Check>,
}

fn empty_table() -> toml::Table {
    toml::Table::new()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeBlock {
    #[serde(default)]
    pub template: PolicyTemplate,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationalParams {
    pub functional: Functional,
    #[serde(default)]
    pub policy: Option<DriftPolicy>,
    #[serde(default)]
    pub optimize: Option<OptimizeBlock>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleBlock {
    pub n_steps: usize,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
}

fn default_nodes() -> usize {
    41
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyParams {
    pub policy: DriftPolicy,
    #[serde(default)]
    pub oracle: Option<OracleBlock>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineParams {
    pub target: DriftPolicy,
    pub stages: PipelineSpec,
    /// Synthetic paths for the left-inverse certificate (0 skips it).
    #[serde(default)]
    pub inverse_paths: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PLFamily {
    Quadratic {
        q: f64,
        #[serde(default)]
        linear: f64,
        s: f64,
    },
    Shifted {
        q: f64,
        m: f64,
    },
    Custom {
        phi_a: Functional,
        phi_b: Functional,
        phi_c: Functional,
        s: f64,
        #[serde(default)]
        density: Option<DriftPolicy>,
    },
}

fn default_triples() -> usize {
    1000
}

fn default_bound() -> f64 {
    2.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrekopaParams {
    pub instance: PLFamily,
    #[serde(default = "default_triples")]
    pub triples: usize,
    #[serde(default = "default_bound")]
    pub bound: f64,
    /// Draw `s` uniformly in the hypothesis check instead of using the instance's `s`.
    #[serde(default)]
    pub sample_s: bool,
    #[serde(default)]
    pub allow_non_wiener: bool,
}

impl PrekopaParams {
    pub fn instance(&self, tau: StoppingRule) -> Result<(PLInstance, Option<bool>)> {
        match &self.instance {
            PLFamily::Quadratic { q, linear, s } => {
                let (inst, cert) = quadratic_family(*q, *linear, *s, tau)?;
                Ok((inst, Some(cert.convex())))
            }
            PLFamily::Shifted { q, m } => Ok((shifted_quadratic(*q, *m, tau)?, Some(*q >= 0.0))),
            PLFamily::Custom {
                phi_a,
                phi_b,
                phi_c,
                s,
                density,
            } => {
                if !(0.0..=1.0).contains(s) {
                    return Err(Error::InvalidArgument(format!("s = {s} outside [0, 1]")));
                }
                Ok((
                    PLInstance {
                        phi_a: phi_a.clone(),
                        phi_b: phi_b.clone(),
                        phi_c: phi_c.clone(),
                        s: *s,
                        density: density.clone().unwrap_or(DriftPolicy::Zero),
                        tau,
                    },
                    None,
                ))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditionsParams {
    /// `E[ρ(-δ_β v)(1) | F_τ] = 1` per cell.
    UnitConditional {
        v: DriftPolicy,
        #[serde(default = "four")]
        k: f64,
    },
    /// Noise identity, composition and pre-`τ` agreement of the shifted flow.
    Flow { u: DriftPolicy, v: DriftPolicy },
}

fn four() -> f64 {
    4.0
}

#[derive(Clone, Debug)]
pub enum Params {
    Variational(VariationalParams),
    Entropy(EntropyParams),
    Pipeline(PipelineParams),
    Prekopa(PrekopaParams),
    Conditions(ConditionsParams),
}

fn typed<T: DeserializeOwned>(name: &str, t: &toml::Table) -> Result<T> {
    T::deserialize(toml::Value::Table(t.clone()))
        .map_err(|e| Error::Config(format!("experiment `{name}`: {e}")))
}

/// One experiment with its parameters parsed and its model built.
#[derive(Clone, Debug)]
pub struct ResolvedExperiment {
    pub entry: ExperimentEntry,
    pub model: Model,
    pub n_paths: usize,
    pub tau: StoppingRule,
    pub params: Params,
}

/// A validated config ready to run.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub grid: TimeGrid,
    pub experiments: Vec<ResolvedExperiment>,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// SHA-256 of the canonical JSON form of the effective config.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canon))
    }

    pub fn resolve(self) -> Result<Resolved> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        let grid = make_grid(self.grid.n_steps).map_err(cfg)?;
        if self.grid.n_paths < 2 {
            return Err(Error::Config("grid.n_paths must be at least 2".into()));
        }
        if self.experiments.is_empty() {
            return Err(Error::Config("no [[experiment]] blocks".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        let mut experiments = Vec::new();
        for e in &self.experiments {
            let bad = |msg: String| Error::Config(format!("experiment `{}`: {msg}", e.name));
            if e.name.is_empty()
                || !e
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(bad("names use [A-Za-z0-9_-] only".into()));
            }
            if !names.insert(e.name.clone()) {
                return Err(bad("duplicate name".into()));
            }
            let model = Model::new(e.model.clone().unwrap_or_else(|| self.model.clone()))
                .map_err(|x| bad(x.to_string()))?;
            let dim = model.dim();
            let tau = e.tau.clone().unwrap_or_else(StoppingRule::degenerate);
            tau.validate().map_err(|x| bad(x.to_string()))?;
            let n_paths = e.n_paths.unwrap_or(self.grid.n_paths);
            if n_paths < 2 {
                return Err(bad("n_paths must be at least 2".into()));
            }
            if e.bins == 0 {
                return Err(bad("bins must be positive".into()));
            }
            for c in &e.checks {
                if !e.kind.metrics().contains(&c.metric.as_str()) {
                    return Err(bad(format!(
                        "unknown metric `{}` (known: {})",
                        c.metric,
                        e.kind.metrics().join(", ")
                    )));
                }
                if c.target.is_none() && c.min.is_none() && c.max.is_none() {
                    return Err(bad(format!("check on `{}` needs target, min or max", c.metric)));
                }
            }
            let v = |r: Result<()>| r.map_err(|x| bad(x.to_string()));
            let params = match e.kind {
                Kind::Variational => {
                    let p: VariationalParams = typed(&e.name, &e.params)?;
                    v(p.functional.validate(dim))?;
                    if let Some(pol) = &p.policy {
                        v(pol.validate(&grid, dim))?;
                    }
                    if let Some(o) = &p.optimize {
                        v(o.template.features.validate())?;
                    }
                    Params::Variational(p)
                }
                Kind::Entropy => {
                    let p: EntropyParams = typed(&e.name, &e.params)?;
                    v(p.policy.validate(&grid, dim))?;
                    if let Some(o) = &p.oracle {
                        let g = make_grid(o.n_steps).map_err(|x| bad(x.to_string()))?;
                        v(p.policy.validate(&g, dim))?;
                    }
                    Params::Entropy(p)
                }
                Kind::Pipeline => {
                    let p: PipelineParams = typed(&e.name, &e.params)?;
                    v(p.target.validate(&grid, dim))?;
                    v(p.stages.validate(&grid))?;
                    Params::Pipeline(p)
                }
                Kind::Prekopa => {
                    let p: PrekopaParams = typed(&e.name, &e.params)?;
                    let (inst, _) = p.instance(tau.clone()).map_err(|x| bad(x.to_string()))?;
                    for f in [&inst.phi_a, &inst.phi_b, &inst.phi_c] {
                        v(f.validate(dim))?;
                    }
                    v(inst.density.validate(&grid, dim))?;
                    Params::Prekopa(p)
                }
                Kind::Conditions => {
                    let p: ConditionsParams = typed(&e.name, &e.params)?;
                    match &p {
                        ConditionsParams::UnitConditional { v: pol, .. } => v(pol.validate(&grid, dim))?,
                        ConditionsParams::Flow { u, v: w } => {
                            v(u.validate(&grid, dim))?;
                            v(w.validate(&grid, dim))?;
                        }
                    }
                    Params::Conditions(p)
                }
            };
            experiments.push(ResolvedExperiment {
                entry: e.clone(),
                model,
                n_paths,
                tau,
                params,
            });
        }
        let hash = self.hash();
        Ok(Resolved {
            config: self,
            grid,
            experiments,
            hash,
        })
    }
}

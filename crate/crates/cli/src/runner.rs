use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use pathvar::conditioning::Cell;
use pathvar::girsanov::{check_unit_conditional, relative_entropy};
use pathvar::models::verify_flow_conditions;
use pathvar::oracle::{grid_density_oracle, policy_shift_map, OracleOutcome};
use pathvar::path_engine::{make_grid, sample_brownian, StreamBlock};
use pathvar::pipeline::{reconstruct_inverse, retarded_observation, run_pipeline};
use pathvar::prekopa::{check_conclusion, check_hypothesis};
use pathvar::variational::{direct_value, duality_gap, optimize, GapCell};
use pathvar::{Error, Result};

use crate::config::{Check, ConditionsParams, Params, Resolved, ResolvedExperiment};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metric {
    pub value: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub metric: String,
    pub value: Option<f64>,
    pub se: Option<f64>,
    pub passed: bool,
    pub rule: Check,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Passed,
    Failed,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub kind: crate::config::Kind,
    pub status: Status,
    pub error: Option<String>,
    pub metrics: BTreeMap<String, Metric>,
    pub checks: Vec<CheckOutcome>,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub n_steps: usize,
    pub experiments: Vec<ExperimentSummary>,
}

impl RunReport {
    /// 0 when every check passed, 3 on a numerical failure, 1 on a failed check.
    pub fn exit_code(&self) -> i32 {
        if self.experiments.iter().any(|e| e.status == Status::Error) {
            3
        } else if self.experiments.iter().any(|e| e.status == Status::Failed) {
            1
        } else {
            0
        }
    }

    pub fn failing_checks(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.experiments {
            if let Some(msg) = &e.error {
                out.push(format!("{}: error: {msg}", e.name));
            }
            for c in e.checks.iter().filter(|c| !c.passed) {
                out.push(format!("{}.{} = {:?}", e.name, c.metric, c.value));
            }
        }
        out
    }
}

#[derive(Serialize)]
struct Timing<'a> {
    config_hash: &'a str,
    total_seconds: f64,
    experiments: Vec<(String, f64)>,
}

/// Plain CSV writer; the first line carries the config hash.
struct Table {
    text: String,
}

impl Table {
    fn new(hash: &str, header: &[&str]) -> Self {
        let mut text = format!("# config_hash={hash}\n");
        text.push_str(&header.join(","));
        text.push('\n');
        Table { text }
    }

    fn row(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    fn save(&self, dir: &Path, name: &str, files: &mut Vec<String>) -> Result<()> {
        std::fs::write(dir.join(name), &self.text)?;
        files.push(name.to_string());
        Ok(())
    }
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

const SCHEMA: &str = r#"{
  "summary.json": "per experiment: name, kind, status, error, metrics {name: {value, se}}, checks, files",
  "timing.json": "wall-clock seconds per experiment (excluded from determinism guarantees)",
  "jtrace.csv": {"iter": "optimizer iteration", "j": "objective estimate", "se": "standard error", "set": "train (minibatch) or validation"},
  "direct_cells.csv": {"cell": "cell index", "lo": "smallest state", "hi": "largest state", "count": "paths", "estimate": "-log E[exp(-f) | cell]", "se": "standard error", "flagged": "1 if too few paths"},
  "gap_cells.csv": {"cell": "cell index or all", "lo": "", "hi": "", "count": "", "objective": "J(u) in the cell", "direct": "direct value in the cell", "gap": "objective - direct", "se": "paired standard error", "flagged": ""},
  "entropy_cells.csv": {"cell": "cell index or all", "lo": "", "hi": "", "count": "", "entropy": "E[L log L | cell]", "half_energy": "E[|u|^2/2 | cell]", "gap": "half_energy - entropy", "se": "paired standard error", "flagged": ""},
  "stages.csv": {"stage": "stage name or total", "lp_distance": "L^p distance of densities to the previous stage", "se": "", "h_distance": "E |u_prev - u|_H^2", "h_se": ""},
  "prekopa_cells.csv": {"cell": "", "lo": "", "hi": "", "count": "", "ea": "E[a | cell]", "eb": "", "ec": "", "slack": "ea - eb^s ec^(1-s)", "se": "", "flagged": ""},
  "unit_cells.csv": {"cell": "", "lo": "", "hi": "", "count": "", "estimate": "E[L | cell]", "se": "", "flagged": ""}
}
"#;

fn cell_table(hash: &str, cells: &[Cell]) -> Table {
    let mut t = Table::new(hash, &["cell", "lo", "hi", "count", "estimate", "se", "flagged"]);
    for (i, c) in cells.iter().enumerate() {
        t.row(&[
            i.to_string(),
            num(c.lo),
            num(c.hi),
            c.count.to_string(),
            num(c.estimate),
            num(c.se),
            (c.flagged as u8).to_string(),
        ]);
    }
    t
}

fn gap_table(hash: &str, overall: (f64, f64, f64, f64), cells: &[GapCell]) -> Table {
    let mut t = Table::new(
        hash,
        &["cell", "lo", "hi", "count", "objective", "direct", "gap", "se", "flagged"],
    );
    let (j, d, g, se) = overall;
    t.row(&[
        "all".into(),
        String::new(),
        String::new(),
        String::new(),
        num(j),
        num(d),
        num(g),
        num(se),
        "0".into(),
    ]);
    for (i, c) in cells.iter().enumerate() {
        t.row(&[
            i.to_string(),
            num(c.lo),
            num(c.hi),
            c.count.to_string(),
            num(c.objective),
            num(c.direct),
            num(c.gap),
            num(c.se),
            (c.flagged as u8).to_string(),
        ]);
    }
    t
}

struct Ctx<'a> {
    res: &'a Resolved,
    exp: &'a ResolvedExperiment,
    block: StreamBlock,
    dir: PathBuf,
    metrics: BTreeMap<String, Metric>,
    files: Vec<String>,
}

impl Ctx<'_> {
    fn put(&mut self, name: &str, value: f64, se: f64) {
        self.metrics.insert(name.to_string(), Metric { value, se });
    }

    fn save(&mut self, t: Table, name: &str) -> Result<()> {
        t.save(&self.dir, name, &mut self.files)
    }

    fn run(&mut self) -> Result<()> {
        let grid = self.res.grid;
        let hash = self.res.hash.clone();
        let exp = self.exp;
        let (model, tau, bins, n) = (&exp.model, &exp.tau, exp.entry.bins, exp.n_paths);
        let block = self.block;
        match &exp.params {
            Params::Variational(p) => {
                let direct = direct_value(model, &p.functional, tau, bins, grid, block.purpose(3), n)?;
                self.put("direct", direct.overall.mean, direct.overall.se);
                if !direct.cells.is_empty() {
                    self.save(cell_table(&hash, &direct.cells), "direct_cells.csv")?;
                }
                let policy = if let Some(o) = &p.optimize {
                    let r = optimize(model, &p.functional, &o.template, tau, &o.optimizer, grid, block)?;
                    let mut t = Table::new(&hash, &["iter", "j", "se", "set"]);
                    for (rows, set) in [(&r.trace, "train"), (&r.validation, "validation")] {
                        for row in rows.iter() {
                            t.row(&[row.iter.to_string(), num(row.j), num(row.se), set.into()]);
                        }
                    }
                    self.save(t, "jtrace.csv")?;
                    self.put("best_iter", r.best_iter as f64, 0.0);
                    self.put("retries", r.retries as f64, 0.0);
                    Some(r.policy)
                } else {
                    p.policy.clone()
                };
                if let Some(pol) = policy {
                    let g = duality_gap(model, &p.functional, &pol, tau, bins, grid, block.purpose(2), n)?;
                    self.put("j", g.objective.mean, g.objective.se);
                    self.put("gap", g.gap.mean, g.gap.se);
                    let scale = g.direct.mean.abs().max(1e-300);
                    self.put("rel_gap", g.relative_gap(), g.gap.se / scale);
                    self.put("worst_z", g.worst_z, 0.0);
                    let overall = (g.objective.mean, g.direct.mean, g.gap.mean, g.gap.se);
                    self.save(gap_table(&hash, overall, &g.cells), "gap_cells.csv")?;
                }
            }
            Params::Entropy(p) => {
                let r = relative_entropy(model, &p.policy, tau, bins, grid, block, n)?;
                self.put("entropy", r.entropy_est.mean, r.entropy_est.se);
                self.put("half_energy", r.half_energy.mean, r.half_energy.se);
                self.put("gap", r.gap.mean, r.gap.se);
                self.put("worst_cell_z", r.worst_cell_z, 0.0);
                self.put("certified", flag(r.certified), 0.0);
                let mut t = Table::new(
                    &hash,
                    &["cell", "lo", "hi", "count", "entropy", "half_energy", "gap", "se", "flagged"],
                );
                t.row(&[
                    "all".into(),
                    String::new(),
                    String::new(),
                    n.to_string(),
                    num(r.entropy_est.mean),
                    num(r.half_energy.mean),
                    num(r.gap.mean),
                    num(r.gap.se),
                    "0".into(),
                ]);
                for (i, c) in r.cells.iter().enumerate() {
                    t.row(&[
                        i.to_string(),
                        num(c.lo),
                        num(c.hi),
                        c.count.to_string(),
                        num(c.entropy),
                        num(c.half_energy),
                        num(c.gap),
                        num(c.se),
                        (c.flagged as u8).to_string(),
                    ]);
                }
                self.save(t, "entropy_cells.csv")?;
                if let Some(o) = &p.oracle {
                    let g = make_grid(o.n_steps)?;
                    let map = policy_shift_map(model, g, &p.policy)?;
                    match grid_density_oracle(g, o.nodes, map)? {
                        OracleOutcome::Value {
                            entropy,
                            half_energy,
                            quadrature_error,
                        } => {
                            self.put("oracle_entropy", entropy, quadrature_error);
                            self.put("oracle_half_energy", half_energy, 0.0);
                            self.put("oracle_quadrature_error", quadrature_error, 0.0);
                            let rel = (entropy - half_energy).abs() / half_energy.abs().max(1e-300);
                            self.put("oracle_rel_diff", rel, 0.0);
                            self.put("oracle_invertible", 1.0, 0.0);
                        }
                        OracleOutcome::NotLeftInvertible { .. } => self.put("oracle_invertible", 0.0, 0.0),
                    }
                }
            }
            Params::Pipeline(p) => {
                let r = run_pipeline(model, &p.target, &p.stages, grid, block, n)?;
                let mut t = Table::new(&hash, &["stage", "lp_distance", "se", "h_distance", "h_se"]);
                for s in &r.stages {
                    t.row(&[
                        s.stage.clone(),
                        num(s.lp_distance.mean),
                        num(s.lp_distance.se),
                        num(s.h_distance.mean),
                        num(s.h_distance.se),
                    ]);
                }
                t.row(&["total".into(), num(r.total.mean), num(r.total.se), String::new(), String::new()]);
                self.save(t, "stages.csv")?;
                self.put("total", r.total.mean, r.total.se);
                self.put("stage_sum", r.stage_sum, 0.0);
                self.put("triangle_margin", r.stage_sum - r.total.mean, r.total.se);
                self.put("membership", flag(r.membership), 0.0);
                self.put("mix_lower_margin", r.mix_range.0 - r.mix_bounds.0, 0.0);
                self.put("mix_upper_margin", r.mix_bounds.1 - r.mix_range.1, 0.0);
                if p.inverse_paths > 0 {
                    let inv = block.purpose(1);
                    let mut worst: f64 = 0.0;
                    for i in 0..p.inverse_paths {
                        let beta = sample_brownian(&inv.stream(i), grid, model.dim());
                        let obs = retarded_observation(&r.final_policy, &beta)?;
                        let (_, cert) = reconstruct_inverse(&r.final_policy, &obs, Some(&beta))?;
                        worst = worst.max(cert.max_reconstruction_error);
                    }
                    self.put("max_reconstruction_error", worst, 0.0);
                }
            }
            Params::Prekopa(p) => {
                let (inst, convex) = p.instance(tau.clone())?;
                if let Some(c) = convex {
                    self.put("convex", flag(c), 0.0);
                }
                let h = check_hypothesis(&inst, model.dim(), p.bound, p.sample_s, grid, block.purpose(1), p.triples)?;
                self.put("min_margin", h.min_margin, 0.0);
                self.put("violations", h.violations as f64, 0.0);
                self.put("non_finite", h.non_finite as f64, 0.0);
                let c = check_conclusion(model, &inst, bins, p.allow_non_wiener, grid, block, n)?;
                let mut worst = f64::INFINITY;
                let mut t = Table::new(
                    &hash,
                    &["cell", "lo", "hi", "count", "ea", "eb", "ec", "slack", "se", "flagged"],
                );
                for (i, s) in c.cells.iter().enumerate() {
                    if !s.flagged {
                        // Round-off allowance as in `ConclusionReport::holds`.
                        let shifted = s.slack + 1e-10;
                        let z = if s.se > 0.0 {
                            shifted / s.se
                        } else if shifted >= 0.0 {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        };
                        worst = worst.min(z);
                    }
                    t.row(&[
                        i.to_string(),
                        num(s.lo),
                        num(s.hi),
                        s.count.to_string(),
                        num(s.ea),
                        num(s.eb),
                        num(s.ec),
                        num(s.slack),
                        num(s.se),
                        (s.flagged as u8).to_string(),
                    ]);
                }
                self.save(t, "prekopa_cells.csv")?;
                self.put("min_slack", c.min_slack, 0.0);
                self.put("worst_slack_z", worst, 0.0);
            }
            Params::Conditions(ConditionsParams::UnitConditional { v, k }) => {
                let r = check_unit_conditional(model, v, tau, bins, *k, grid, block, n)?;
                self.put("max_abs_z", r.max_abs_z, 0.0);
                self.put("unit_passes", flag(r.passes), 0.0);
                self.put("vanishes", flag(r.vanishes_before_tau), 0.0);
                self.save(cell_table(&hash, &r.cells), "unit_cells.csv")?;
            }
            Params::Conditions(ConditionsParams::Flow { u, v }) => {
                let r = verify_flow_conditions(model, u, v, tau, grid, block, n)?;
                if let Some(x) = r.noise_identity {
                    self.put("noise_identity", x, 0.0);
                }
                if let Some(x) = r.composition {
                    self.put("composition", x, 0.0);
                }
                self.put("pre_tau", r.pre_tau, 0.0);
            }
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Runs every experiment in order, writing `summary.json` after each one.
///
/// Experiment `i` draws from streams `StreamBlock::for_experiment(seed, i)`.
pub fn run(res: &Resolved, out: &Path) -> Result<RunReport> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("schema.json"), SCHEMA)?;
    let started = Instant::now();
    let mut report = RunReport {
        config_hash: res.hash.clone(),
        seed: res.config.grid.seed,
        n_steps: res.grid.n_steps(),
        experiments: Vec::new(),
    };
    let mut timing = Vec::new();
    for (i, exp) in res.experiments.iter().enumerate() {
        let t0 = Instant::now();
        let dir = out.join(&exp.entry.name);
        std::fs::create_dir_all(&dir)?;
        let mut ctx = Ctx {
            res,
            exp,
            block: StreamBlock::for_experiment(res.config.grid.seed, i as u64),
            dir,
            metrics: BTreeMap::new(),
            files: Vec::new(),
        };
        let outcome = ctx.run();
        let error = match outcome {
            Ok(()) => None,
            Err(e @ Error::Io(_)) => return Err(e),
            Err(e) => Some(e.to_string()),
        };
        let checks: Vec<CheckOutcome> = exp
            .entry
            .checks
            .iter()
            .map(|c| {
                let m = ctx.metrics.get(&c.metric);
                CheckOutcome {
                    metric: c.metric.clone(),
                    value: m.map(|m| m.value),
                    se: m.map(|m| m.se),
                    passed: m.is_some_and(|m| c.passes(m.value, m.se)),
                    rule: c.clone(),
                }
            })
            .collect();
        let status = if error.is_some() {
            Status::Error
        } else if checks.iter().all(|c| c.passed) {
            Status::Passed
        } else {
            Status::Failed
        };
        report.experiments.push(ExperimentSummary {
            name: exp.entry.name.clone(),
            kind: exp.entry.kind,
            status,
            error,
            metrics: ctx.metrics,
            checks,
            files: ctx.files,
        });
        timing.push((exp.entry.name.clone(), t0.elapsed().as_secs_f64()));
        write_json(&out.join("summary.json"), &report)?;
        write_json(
            &out.join("timing.json"),
            &Timing {
                config_hash: &res.hash,
                total_seconds: started.elapsed().as_secs_f64(),
                experiments: timing.clone(),
            },
        )?;
    }
    Ok(report)
}

/// One line per experiment and failing check, for the terminal.
pub fn render(report: &RunReport) -> String {
    let mut s = String::new();
    for e in &report.experiments {
        let tag = match e.status {
            Status::Passed => "PASS",
            Status::Failed => "FAIL",
            Status::Error => "ERROR",
        };
        let _ = writeln!(s, "{tag:5} {}", e.name);
        if let Some(msg) = &e.error {
            let _ = writeln!(s, "      {msg}");
        }
        for c in &e.checks {
            let v = c.value.map_or("missing".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "      {} {} = {v}",
                if c.passed { "ok  " } else { "fail" },
                c.metric
            );
        }
    }
    s
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pathvar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathvar")).args(args).output().unwrap()
}

fn write(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

const HEADER: &str = r#"
[grid]
n_steps = 16
n_paths = 2000
seed = 3

[model]
family = "wiener"
dim = 1
"#;

const ZERO: &str = r#"
[[experiment]]
name = "zero"
kind = "variational"
params.functional = { name = "constant", value = 0.0 }

[[experiment.check]]
metric = "direct"
target = 0.0
abs_tol = 1e-12
"#;

#[test]
fn validate_accepts_bundled_configs() {
    for name in ["smoke.toml", "acceptance.toml"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
        let out = pathvar(&["validate", path.to_str().unwrap()]);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), &format!("{HEADER}{ZERO}\nbogus = 1\n"));
    assert_eq!(pathvar(&["validate", &cfg]).status.code(), Some(2));
    assert_eq!(pathvar(&["run", &cfg, "--out", dir.path().to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn unknown_metric_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{HEADER}{ZERO}\n[[experiment.check]]\nmetric = \"nope\"\nmax = 1.0\n");
    let cfg = write(dir.path(), &body);
    let out = pathvar(&["validate", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn list_functionals_prints_catalog() {
    let out = pathvar(&["list-functionals"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["constant", "terminal_linear", "terminal_quadratic", "sum"] {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn passing_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{HEADER}{ZERO}").replace("kind = \"variational\"", "kind = \"variational\"\ntau = { kind = \"deterministic\", t = 0.5 }");
    let cfg = write(dir.path(), &body);
    let out_dir = dir.path().join("out");
    let out = pathvar(&["run", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let hash = summary["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    let csv = fs::read_to_string(out_dir.join("zero").join("direct_cells.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={hash}")));
    assert!(out_dir.join("schema.json").exists());
    assert!(out_dir.join("timing.json").exists());
}

#[test]
fn impossible_tolerance_fails_check() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        r#"{HEADER}
[[experiment]]
name = "linear"
kind = "variational"
params.functional = {{ name = "terminal_linear", weights = [1.0] }}

[[experiment.check]]
metric = "direct"
target = -0.5
abs_tol = 1e-12
"#
    );
    let cfg = write(dir.path(), &body);
    let out = pathvar(&["run", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FAIL") && text.contains("linear") && text.contains("direct"), "{text}");
}

#[test]
fn seed_override_changes_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), &format!("{HEADER}{ZERO}"));
    let hash = |seed: &str| {
        let o = dir.path().join(seed);
        let out = pathvar(&["run", &cfg, "--seed", seed, "--out", o.to_str().unwrap()]);
        assert!(out.status.success());
        let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("summary.json")).unwrap()).unwrap();
        s["config_hash"].as_str().unwrap().to_owned()
    };
    assert_ne!(hash("1"), hash("2"));
}

#[test]
fn runtime_failure_exits_three() {
    // The conclusion check refuses non-Wiener bases unless explicitly allowed.
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        r#"{HEADER}
[[experiment]]
name = "bridge_prekopa"
kind = "prekopa"
model = {{ family = "brownian_bridge", endpoint = [0.0] }}
tau = {{ kind = "deterministic", t = 0.5 }}
params.instance = {{ family = "quadratic", q = 0.3, s = 0.5 }}
params.triples = 50

[[experiment.check]]
metric = "min_slack"
min = -1.0
"#
    );
    let cfg = write(dir.path(), &body);
    let out = pathvar(&["run", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ERROR"));
}

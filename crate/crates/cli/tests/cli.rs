//! End-to-end runs of the `gelfand-smp` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gelfand-smp"))
}

struct Case {
    dir: tempfile::TempDir,
}

impl Case {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.toml"), config).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("config.toml")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, sub: &str, extra: &[&str]) -> Output {
        bin()
            .arg(sub)
            .arg("--config")
            .arg(self.config())
            .arg("--out")
            .arg(self.out())
            .args(extra)
            .output()
            .unwrap()
    }

    fn json(&self, name: &str) -> Value {
        read_json(&self.out().join(name))
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Scalar problem with no noise and no jumps: `dX = c X dt`.
fn deterministic(c: f64, steps: usize, x0: f64) -> String {
    format!(
        r#"schema_version = 1
steps = {steps}
paths = 3
[problem]
c = {{ kind = "constant", value = {c} }}
rho = {{ kind = "constant", value = 0.0 }}
gammas = [0.0]
x0 = [{x0}]
"#
    )
}

#[test]
fn simulate_zero_dynamics_gives_constant_paths() {
    let case = Case::new(&deterministic(0.0, 8, 0.7));
    let o = case.run("simulate", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(case.out().join("states.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let value: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(value, 0.7);
        rows += 1;
    }
    assert_eq!(rows, 3 * 9);
    let est = case.json("estimate.json");
    assert_eq!(est["coercivity"]["satisfied"], false);
}

#[test]
fn simulate_decay_approaches_exp_minus_one() {
    for steps in [64, 128] {
        let case = Case::new(&deterministic(-1.0, steps, 1.0));
        let o = case.run("simulate", &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let csv = fs::read_to_string(case.out().join("terminal.csv")).unwrap();
        for line in csv.lines().skip(1) {
            let x: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            // The assembled operator is −1 up to quadrature rounding.
            assert!((x - (-1.0f64).exp()).abs() <= 2.0 / steps as f64, "{x}");
        }
    }
}

#[test]
fn simulate_with_picard_writes_trace() {
    let case = Case::new(
        "schema_version = 1\nsteps = 16\npaths = 50\n[simulate]\nsolver = \"picard\"\ncontrol = { kind = \"riccati\" }\n",
    );
    let o = case.run("simulate", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let picard = case.json("picard.json");
    assert!(picard["iterations"].as_u64().unwrap() >= 1);
}

#[test]
fn zero_steps_is_a_config_error() {
    let case = Case::new("schema_version = 1\nsteps = 0\n");
    let o = case.run("simulate", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("steps"), "{}", stderr(&o));
    assert!(!case.out().join("manifest.json").exists());
}

#[test]
fn usage_and_schema_errors_exit_two() {
    let case = Case::new("schema_version = 1\nunknown_key = 1\n");
    assert_eq!(code(&case.run("simulate", &[])), 2);
    let case = Case::new("schema_version = 7\n");
    assert_eq!(code(&case.run("audit", &[])), 2);
    assert_eq!(code(&bin().output().unwrap()), 2);
    assert_eq!(code(&bin().arg("simulate").output().unwrap()), 2);
    assert_eq!(code(&bin().args(["frobnicate", "--config", "x"]).output().unwrap()), 2);
    let case = Case::new("schema_version = 1\n");
    assert_eq!(code(&case.run("simulate", &["--threads", "0"])), 2);
}

#[test]
fn audit_passes_on_coercive_example() {
    let case = Case::new("schema_version = 1\npaths = 400\n");
    let o = case.run("audit", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = case.json("audit_summary.json");
    assert_eq!(summary["passed"], true);
    let dep = case.json("audit_dependence.json");
    let slope = dep["details"]["table"]["slope_sup"].as_f64().unwrap();
    assert!((slope - 2.0).abs() <= 0.1, "{slope}");
    let ito = case.json("audit_ito.json");
    assert!(ito["details"]["slope"].as_f64().unwrap() >= 0.4);
}

#[test]
fn audit_flags_non_coercive_operator() {
    // A = 0 and B = I on a single mode.
    let config = r#"schema_version = 1
paths = 50
[problem]
c = { kind = "constant", value = 0.0 }
rho = { kind = "constant", value = 1.0 }
[audit]
audits = ["coercivity", "transpose"]
"#;
    let case = Case::new(config);
    let o = case.run("audit", &[]);
    assert_eq!(code(&o), 1);
    assert_eq!(case.json("audit_coercivity.json")["passed"], false);
    assert_eq!(case.json("audit_transpose.json")["passed"], true);
    assert!(case.out().join("manifest.json").exists());
}

#[test]
fn optimize_reaches_riccati_cost() {
    let case = Case::new("schema_version = 1\nsteps = 32\npaths = 2000\n");
    let o = case.run("optimize", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = case.json("summary.json");
    assert!(summary["oracle"]["cost_gap"].as_f64().unwrap() <= 0.01);
    assert_eq!(summary["verification_passed"], true);
    let trace = fs::read_to_string(case.out().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,J,stderr,residual,step\n"));

    // The optimised law can be replayed through `simulate`.
    let control = case.out().join("control.txt");
    let replay = Case::new(&format!(
        "schema_version = 1\nsteps = 32\npaths = 20\n[simulate]\ncontrol = {{ kind = \"file\", path = {:?} }}\n",
        control.display().to_string()
    ));
    let o = replay.run("simulate", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn zero_coupling_converges_after_one_update() {
    let config = "schema_version = 1\nsteps = 16\npaths = 200\ncontrol_coupling = 0.0\n[optimize]\nbeta = 1.0\n";
    let case = Case::new(config);
    let o = case.run("optimize", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = case.json("summary.json");
    assert_eq!(summary["trace"]["converged"], true);
    assert_eq!(summary["trace"]["updates"], 1);
    assert!(summary["oracle"].is_null());
}

#[test]
fn step_underflow_exits_one_with_trace() {
    let config = r#"schema_version = 1
steps = 16
paths = 200
control_coupling = 0.0
[optimize]
method = "projected_gradient"
tol = 0.0
"#;
    let case = Case::new(config);
    let o = case.run("optimize", &[]);
    assert_eq!(code(&o), 1);
    let trace = fs::read_to_string(case.out().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    let summary = case.json("summary.json");
    assert!(summary["error"].as_str().unwrap().contains("step size"));
}

#[test]
fn example8_stops_at_validation_when_not_superparabolic() {
    let config = "schema_version = 1\nsteps = 8\npaths = 10\n[problem]\na = { kind = \"constant\", value = 0.1 }\n";
    let case = Case::new(config);
    let o = case.run("example8", &[]);
    assert_eq!(code(&o), 1);
    let report = case.json("report.json");
    assert_eq!(report["failed_stage"], "validation");
    assert!(report["riccati_value"].is_null());
}

#[test]
fn seed_flag_overrides_config() {
    let case = Case::new("schema_version = 1\nseed = 3\nsteps = 4\npaths = 5\n");
    let o = case.run("simulate", &["--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = case.json("manifest.json");
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["subcommand"], "simulate");
    for name in ["states.csv", "terminal.csv", "estimate.json"] {
        assert!(manifest["artifacts"][name]["sha256"].is_string(), "{name}");
    }
}

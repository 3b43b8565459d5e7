use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hybrid_ensemble_cli::report::{Provenance, VerificationReport};
use hybrid_ensemble_cli::suites::{EHRENFEST_COLUMNS, THERMAL_COLUMNS};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hybrid-ensemble"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("HYBRID_ENSEMBLE_THREADS").output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn read_report(p: &Path) -> VerificationReport {
    VerificationReport::from_json(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn selfcheck_passes_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("self.json");
    let o = run(&["selfcheck", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_report(&out);
    assert!(r.passed && r.rows.iter().all(|row| row.passed));
    for suite in ["brackets", "homogeneity", "ehrenfest", "measure", "thermal", "stationarity"] {
        assert!(r.rows.iter().any(|row| row.identity.starts_with(&format!("{suite}: "))), "no {suite} rows");
    }
}

#[test]
fn ehrenfest_example_tracks_the_ode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("coupled.csv");
    let o = run(&["ehrenfest", "--config", path_str(&example("coupled_ho.cfg")), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().next().unwrap(), EHRENFEST_COLUMNS.join(","));
    let r = read_report(&dir.path().join("coupled.report.json"));
    let ode_rows: Vec<_> = r.rows.iter().filter(|row| row.provenance == Provenance::Ode).collect();
    assert_eq!(ode_rows.len(), 4);
    assert!(ode_rows.iter().all(|row| row.residual < 1e-4));
    assert!(r.passed);
}

#[test]
fn thermal_without_beta_is_a_config_error() {
    let o = run(&["thermal", "--hamiltonian", "ho(m=1,omega=1)"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("experiment.beta"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[experiment]\nbeta = 1.0\ntemperature = 3.0\n").unwrap();
    let o = run(&["thermal", "--config", path_str(&cfg), "--hamiltonian", "ho"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("temperature"), "{}", stderr(&o));
}

#[test]
fn thermal_output_is_deterministic_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = |p: &Path| {
        vec!["thermal", "--hamiltonian", "ho(m=1,omega=1)", "--beta", "2", "--samples", "400", "--t-avg", "100", "--seed", "5", "--out"]
            .into_iter()
            .map(String::from)
            .chain([path_str(p).to_string()])
            .collect::<Vec<_>>()
    };
    let o1 = bin().args(args(&a)).env("HYBRID_ENSEMBLE_THREADS", "1").output().unwrap();
    let o2 = bin().args(args(&b)).env("HYBRID_ENSEMBLE_THREADS", "3").output().unwrap();
    assert_eq!(code(&o1), 0, "{}", stderr(&o1));
    assert_eq!(code(&o2), 0, "{}", stderr(&o2));
    let (ca, cb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ca, cb);
    assert_eq!(std::fs::read(dir.path().join("a.report.json")).unwrap(), std::fs::read(dir.path().join("b.report.json")).unwrap());
    let text = String::from_utf8(ca).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), THERMAL_COLUMNS.join(","));
    // default observables: H, x2, k2; each row has 17 significant digits
    assert_eq!(lines.clone().count(), 3);
    for line in lines {
        let last = line.rsplit(',').next().unwrap();
        let mantissa = last.trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.replace('.', "").len(), 17, "{line}");
    }
}

#[test]
fn brackets_report_is_reproducible_and_names_its_oracles() {
    let a = run(&["brackets", "--seed", "9"]);
    let b = run(&["brackets", "--seed", "9"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let r = VerificationReport::from_json(std::str::from_utf8(&a.stdout).unwrap()).unwrap();
    assert_eq!(r.schema_version, 1);
    assert_eq!(r.environment.seed, Some(9));
    let raw: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    for row in raw["rows"].as_array().unwrap() {
        let p = row["provenance"].as_str().unwrap();
        assert!(["analytic", "quadrature", "ode", "matrix"].contains(&p), "{p}");
    }
    assert!(r.rows.iter().any(|row| row.provenance == Provenance::Matrix));
    assert!(r.rows.iter().any(|row| row.provenance == Provenance::Quadrature));
}

#[test]
fn measure_writes_distribution_branches_and_collapse() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let o = run(&["measure", "--operator", "sigma_z", "--state", "0.6, 0.8i", "--K", "4", "--pointer-width", "0.5", "--collapse-at", "-4", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let branches = std::fs::read_to_string(dir.path().join("m.branches.csv")).unwrap();
    let mut rows = branches.lines().skip(1).map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>());
    let minus = rows.next().unwrap();
    assert_eq!(minus[0], -1.0);
    assert!((minus[1] - 0.64).abs() < 1e-9);
    let collapse = std::fs::read_to_string(dir.path().join("m.collapse.csv")).unwrap();
    let level1: Vec<f64> = collapse.lines().nth(2).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((level1[3] - 1.0).abs() < 1e-8);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 257);
}

#[test]
fn measure_json_and_no_collapse() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.json");
    let o = run(&["measure", "--operator", "diag(1,1,-1)", "--state", "0.6,0.48i,0.64", "--collapse-at", "none", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert!(doc["collapse"].is_null());
    let b = doc["branches"].as_array().unwrap();
    assert!((b[0]["pointer_weight"].as_f64().unwrap() - 0.4096).abs() < 1e-9);
    assert!((b[1]["pointer_weight"].as_f64().unwrap() - 0.5904).abs() < 1e-9);
}

#[test]
fn ambiguous_reading_and_bad_state_are_input_errors() {
    let o = run(&["measure", "--state", "1,1", "--collapse-at", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("ambiguous"), "{}", stderr(&o));
    assert_eq!(code(&run(&["measure", "--state", "0.6,zero"])), 2);
    assert_eq!(code(&run(&["measure", "--operator", "sigma_z", "--state", "1,0,0"])), 2);
}

#[test]
fn usage_io_and_thread_errors_exit_two() {
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["brackets", "--out", "/nonexistent-dir/x/report.json"])), 2);
    let o = bin().args(["brackets"]).env("HYBRID_ENSEMBLE_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn in_process_run_matches_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.json");
    assert_eq!(hybrid_ensemble_cli::run(["hybrid-ensemble", "brackets", "--seed", "9", "--out", path_str(&out)]), 0);
    let from_bin = run(&["brackets", "--seed", "9"]);
    assert_eq!(std::fs::read(&out).unwrap(), from_bin.stdout);
}

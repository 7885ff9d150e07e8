//! End-to-end runs of the `sdelab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn sdelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdelab")).args(args).output().unwrap()
}

fn config(name: &str) -> String {
    root().join("configs").join(name).to_string_lossy().into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn malformed_config_fails_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\neigenvalues = [1.0]\nomgea = 2\n").unwrap();
    let out = tmp.path().join("out");
    let r = sdelab(&["--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "all"]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("omgea") && err.contains("line 3"), "{err}");
    assert!(!out.exists());
}

#[test]
fn counterexample_reports_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let r = sdelab(&["--out-dir", tmp.path().to_str().unwrap(), "counterexample"]);
    assert_eq!(r.status.code(), Some(0));
    let rep = json(&tmp.path().join("counterexample.json"));
    let b = rep["rows"][2]["balayage_at_one"].as_f64().unwrap();
    assert!((b - (-(2f64).sqrt()).exp()).abs() < 1e-3);
    assert_eq!(rep["verdict"], "extension condition (i) passes, polarity fails ⇒ no natural extension");
    let manifest = json(&tmp.path().join("manifest.json"));
    assert_eq!(manifest["checks"][0]["pass"], true);
    assert!(tmp.path().join("counterexample.csv").exists());
}

#[test]
fn all_passes_on_the_ou_config() {
    let tmp = tempfile::tempdir().unwrap();
    let r = sdelab(&["--config", &config("ou.toml"), "--budget-scale", "0.05", "--out-dir", tmp.path().to_str().unwrap(), "all"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stdout));
    let manifest = json(&tmp.path().join("manifest.json"));
    assert!(manifest["checks"].as_array().unwrap().len() >= 10);
    assert_eq!(manifest["master_seed"], 20240611);
}

#[test]
fn failed_check_flips_exit_status() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("chain.toml")).unwrap();
    let start = text.find("u_potential_of").unwrap();
    let mut u = vec!["0.0"; 50];
    u[1] = "1.0";
    let text = format!("{}u = [{}]\n", &text[..start], u.join(", ")).replace("set = [0, 49]", "set = [0, 1]");
    let cfg = tmp.path().join("not_excessive.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("out");
    let r = sdelab(&["--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "potential", "reduce"]);
    assert_eq!(r.status.code(), Some(1));
    let rep = json(&out.join("potential_reduce.json"));
    assert!(rep["report"]["agreement"].as_f64().unwrap() > 1e-3);
    assert!(!rep["report"]["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn simulate_writes_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("paths.csv");
    let r = sdelab(&[
        "--config", &config("abs_sin.toml"), "--out-dir", tmp.path().to_str().unwrap(),
        "simulate", "--paths", "3", "--dt", "0.1", "--horizon", "1", "--out", csv.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.matches("# path=").count(), 3);
    assert!(text.contains("t,x1,x2,x3,girsanov_stoch,girsanov_quad"));
    assert_eq!(text.lines().filter(|l| l.starts_with("1,")).count(), 3);
}

#[test]
fn seed_flag_changes_estimates() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        let r = sdelab(&["--config", &config("ou.toml"), "--seed", seed, "--budget-scale", "0.05", "--out-dir", out.to_str().unwrap(), "verify-ito"]);
        assert_eq!(r.status.code(), Some(0));
        std::fs::read(out.join("ito.json")).unwrap()
    };
    assert_eq!(run("1", "a"), run("1", "b"));
    assert_ne!(run("1", "c"), run("2", "d"));
}

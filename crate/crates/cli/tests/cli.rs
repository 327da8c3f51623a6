use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_netid1d"));
    cmd.env_remove("NETID1D_SEED");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"{"n":2,"m":1,"p":2,"N":12,"R":3,"L":200,"s":4,"snr_db":40}"#;

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(bin().arg("--help")).status.code(), Some(0));
    assert_eq!(run(bin().arg("--version")).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&mut bin()).status.code(), Some(1));
    assert_eq!(run(bin().arg("frobnicate")).status.code(), Some(1));
    let out = run(bin().args(["identify", "--config"]).arg(dir.path().join("missing.json")));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read config"));

    let cfg = write_config(dir.path(), r#"{"n":2,"bogus_key":1}"#);
    let out = run(bin().args(["generate", "--out"]).arg(dir.path().join("o")).arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    let out = run(bin().args(["identify", "--s", "5", "--out"]).arg(dir.path().join("o2")));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_two_and_names_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"n":2,"m":1,"p":2,"N":12,"R":3,"L":200,"s":4,"realizer":{"gap_threshold":1e300}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = run(bin().arg("identify").arg("--config").arg(&cfg).arg("--out").arg(&out_dir));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage order-selection"));
    assert!(out_dir.join("manifest.json").exists(), "manifest is written even on failure");
}

#[test]
fn generate_respects_seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |sub: &str, seed: Option<&str>, env: Option<&str>| {
        let out = dir.path().join(sub);
        let mut cmd = bin();
        cmd.args(["generate", "--n", "2", "--out"]).arg(&out);
        if let Some(s) = seed {
            cmd.args(["--seed", s]);
        }
        if let Some(e) = env {
            cmd.env("NETID1D_SEED", e);
        }
        let o = run(&mut cmd);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 1);
        std::fs::read_to_string(out.join("network.json")).unwrap()
    };
    let a = gen("a", Some("7"), None);
    let b = gen("b", None, Some("7"));
    let c = gen("c", Some("7"), Some("8"));
    let d = gen("d", None, Some("8"));
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_ne!(a, d);
    let manifest = read_json(&dir.path().join("a/manifest.json"));
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["config"]["n"], 2);
}

#[test]
fn simulate_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("sim");
    let o = run(bin().arg("simulate").arg("--config").arg(&cfg).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    // Long format: one row per (time, subsystem, channel).
    assert!(text.starts_with("k,subsystem,channel,u,y_clean,y\n"));
    assert_eq!(text.lines().count(), 1 + 200 * 12 * 2);
}

#[test]
fn identify_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("id");
    let o = run(
        bin().arg("identify").arg("--config").arg(&cfg).args(["--n", "2", "--trace", "--dump-factors", "--out"]).arg(&out),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.starts_with("identify: n=2"));
    for f in [
        "manifest.json",
        "result.json",
        "markov.json",
        "impulse.csv",
        "estimator_trace.csv",
        "estimator_spectra.csv",
        "factor_W.csv",
        "factor_E.csv",
        "factor_O.csv",
        "factor_C.csv",
        "factor_H.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let result = read_json(&out.join("result.json"));
    assert!(result["fit"]["fit_a"].as_f64().unwrap().is_finite());
    let markov = read_json(&out.join("markov.json"));
    let theta = markov["theta"].as_array().unwrap();
    assert!(theta.iter().any(|t| t["kind"] == "corner"));
    assert!(theta.iter().any(|t| t["identifiable"] == true));
    let impulse = std::fs::read_to_string(out.join("impulse.csv")).unwrap();
    assert_eq!(impulse.lines().count(), 1 + 3 * 11);
}

#[test]
fn oracle_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("oc");
    let o = run(bin().args(["oracle-check", "--systems", "5", "--out"]).arg(&out));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("checks passed"));
    assert_eq!(std::fs::read_to_string(out.join("oracle_check.csv")).unwrap().lines().count(), 5);
}

#[test]
fn sweeps_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("\"snr_db\":40", "\"snr_db\":30"));
    let sweep = |sub: &str, jobs: &str| {
        let out = dir.path().join(sub);
        let o = run(
            bin()
                .arg("lambda-sweep")
                .arg("--config")
                .arg(&cfg)
                .args(["--n", "2", "--grid", "1e-3,1e-1", "--trials", "2", "--seed", "3", "--jobs", jobs, "--out"])
                .arg(&out),
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = sweep("a", "1");
    let b = sweep("b", "2");
    for f in ["lambda_sweep.csv", "lambda_sweep_trials.csv", "lambda_sweep_manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let summary = std::fs::read_to_string(a.join("lambda_sweep.csv")).unwrap();
    assert!(summary.starts_with("lambda,fit_A_mean"));
    assert_eq!(summary.lines().count(), 3);
    // A configured SNR overrides the 40 dB lambda-sweep default.
    assert_eq!(read_json(&a.join("manifest.json"))["config"]["snr_db"], 30.0);
}

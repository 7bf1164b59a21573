use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ssdgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssdgp")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL_MODEL: &str = r#"{"nodes": [
    {"id": [1, 1], "alpha": 1, "lengthscale": {"parent": [2, 1], "wrap": "exp"}, "magnitude": {"fixed": 0.6}},
    {"id": [2, 1], "alpha": 0, "lengthscale": {"fixed": 0.05}, "magnitude": {"fixed": 2.0}}
]}"#;

fn small_config(dir: &Path, solver: &str, model: &str) -> PathBuf {
    write(dir, "model.json", model);
    let cfg = format!(
        r#"{{"data": {{"kind": "rectangle", "samples": 60}}, "model": "model.json", "solver": "{solver}",
            "trials": 2, "seed": 3, "output": {{"path": "out.csv"}}}}"#
    );
    write(dir, "config.json", &cfg)
}

#[test]
fn run_writes_results_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "ekfs", SMALL_MODEL);
    let out = ssdgp(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    assert!(text.starts_with("# solver=ekfs trials=2 failures=0\ntrial,seed,status,rmse,nlpd\n"));
    assert_eq!(text.lines().filter(|l| l.contains(",ok,")).count(), 2);
    let timing = std::fs::read_to_string(dir.path().join("out.csv.timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 3);

    // same bytes on rerun, to a different path
    let again = dir.path().join("again.csv");
    assert!(ssdgp(&["run", "--config", cfg.to_str().unwrap(), "--output", again.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read(&again).unwrap(), text.as_bytes());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = ssdgp(&["run", "--config", "/nonexistent/config.json"]);
    assert_eq!(missing.status.code(), Some(2));
    let bad = write(dir.path(), "bad.json", r#"{"data": {"kind": "rectangle", "samples": 10}, "solver": "ckfs"}"#);
    let out = ssdgp(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs a model"));
    let cyclic = r#"{"nodes": [
        {"id": [1, 1], "alpha": 0, "lengthscale": {"parent": [2, 1]}, "magnitude": {"fixed": 1.0}},
        {"id": [2, 1], "alpha": 0, "lengthscale": {"parent": [1, 1]}, "magnitude": {"fixed": 1.0}}
    ]}"#;
    let cfg = small_config(dir.path(), "ekfs", cyclic);
    assert_eq!(ssdgp(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn all_failed_trials_exit_with_three() {
    // a lengthscale of 1e-6 makes the leaf drift far too stiff for the step size
    let stiff = SMALL_MODEL.replace("0.05", "1e-6").replace("2.0", "50.0");
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "ckfs", &stiff);
    let out = ssdgp(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    assert!(text.starts_with("# solver=ckfs trials=2 failures=2"));
}

#[test]
fn cov_analysis_table() {
    let out = ssdgp(&["cov-analysis", "--mu", "-1", "--a", "-1", "--b", "1", "--dt", "0.1", "--R", "0.1", "--steps", "50"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,pred_ff,pred_fs,post_fs,shrink,bound");
    assert_eq!(lines.len(), 52);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bound holds: true"));
    let bad = ssdgp(&["cov-analysis", "--mu", "1", "--a", "-1", "--b", "1", "--dt", "0.1", "--R", "0.1", "--steps", "5"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn sample_prior_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "m.json", SMALL_MODEL);
    let draw = |seed: &str| ssdgp(&["sample-prior", "--model", model.to_str().unwrap(), "--seed", seed, "--points", "20"]).stdout;
    let a = draw("5");
    assert_eq!(a, draw("5"));
    assert_ne!(a, draw("6"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("t,u_1_1,u_2_1\n"));
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn ingest_reports_interpolation_grid() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "strain.txt", "# rate: 16384\n1e-21\n-2e-21\n3e-21\n");
    let series = dir.path().join("series.csv");
    let out = ssdgp(&["ingest", "--input", input.to_str().unwrap(), "--output", series.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("3 measurements"));
    let text = std::fs::read_to_string(series).unwrap();
    assert_eq!(text.lines().next(), Some("time,y"));
    assert_eq!(text.lines().count(), 4);
    let bad = write(dir.path(), "bad.txt", "0.2,1\n0.1,2\n");
    assert_eq!(ssdgp(&["ingest", "--input", bad.to_str().unwrap()]).status.code(), Some(2));
}

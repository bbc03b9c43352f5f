use std::path::Path;
use std::process::{Command, Output};

fn tune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tune-mbrl"))
        .args(args)
        .env("TUNE_MBRL_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn search_evaluate_and_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pbt = dir.path().join("pbt");
    let out = tune(&[
        "search", "--scheduler", "pbt", "--env", "synthetic", "--pop", "6", "--interval", "5",
        "--budget", "20", "--copy-history", "true", "--seed", "3", "--out", path(&pbt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pbt.join("runlog.ndjson").exists());

    let out = tune(&["evaluate", "--schedule", path(&pbt.join("schedule.csv")), "--seeds", "2", "--trials", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(pbt.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 11);
    assert!(curve.starts_with("trial,mean_return,curve,seed_0,seed_1"));

    let out = tune(&["analyze", "trends", "--log", path(&pbt), "--k", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pbt.join("trends.csv").exists());

    let hb = dir.path().join("hb");
    let out = tune(&[
        "search", "--scheduler", "hyperband", "--env", "synthetic", "--b-min", "2", "--b-max", "18",
        "--eta", "3", "--hb-iterations", "1", "--out", path(&hb),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = tune(&["analyze", "corr", "--log", path(&hb)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let corr = std::fs::read_to_string(hb.join("corr.csv")).unwrap();
    assert!(corr.starts_with("low_budget,high_budget,cor,p,n"));
    assert!(corr.lines().count() >= 2);

    let hist = dir.path().join("hist.csv");
    let out = tune(&["analyze", "hist", "--log", path(&pbt), path(&hb), "--bins", "5", "--out", path(&hist)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&hist).unwrap();
    assert!(text.contains("hyperband") && text.contains("pbt"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = tune(&["search", "--scheduler", "grid", "--env", "synthetic", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = tune(&["search", "--scheduler", "pbt", "--env", "synthetic", "--pop", "1", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = tune(&["search", "--env", "mars", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resuming_with_a_different_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str| {
        tune(&[
            "search", "--scheduler", "random", "--env", "synthetic", "--pop", "3", "--budget", "2",
            "--seed", seed, "--out", path(dir.path()),
        ])
    };
    assert!(run("0").status.success());
    assert!(run("0").status.success());
    let out = run("1");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different configuration"));
}

#[test]
fn runtime_failures_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = tune(&["evaluate", "--schedule", path(&missing), "--env", "synthetic"]);
    assert_eq!(out.status.code(), Some(3));
}

use std::path::Path;
use std::process::{Command, Output};

use discrete_grad::csv::read_csv;
use serde_json::Value;

fn run(args: &[&str], data_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discrete-grad"))
        .args(args)
        .env("DISCRETE_GRAD_DATA_DIR", data_dir)
        .output()
        .unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
    serde_json::from_str(stderr.trim()).unwrap()
}

fn config(dir: &Path, json: &str) -> String {
    let p = dir.join("c.json");
    std::fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn failures_have_distinct_codes_and_one_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    let out = out_dir.to_str().unwrap();

    let usage = run(&["train", "--no-such-flag"], tmp.path());
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(error_line(&usage)["error"], "usage");

    let bad = config(tmp.path(), r#"{"run": {"epochs": "many"}}"#);
    let cfg = run(&["train", "--config", &bad, "--out", out], tmp.path());
    assert_eq!(cfg.status.code(), Some(3));
    assert_eq!(error_line(&cfg)["error"], "config");

    let missing = run(&["train", "--dataset", "mnist", "--out", out], tmp.path());
    assert_eq!(missing.status.code(), Some(4));
    assert_eq!(error_line(&missing)["exit_code"], 4);
}

#[test]
fn coupled_only_grid_emits_only_the_diagonal() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        r#"{"run": {"epochs": 1}, "grid": {"coupled_only": true, "tau_forward_values": [0.5, 2.0], "tau_backward_values": [0.5, 1.0, 2.0], "seeds": [0, 1]}}"#,
    );
    let out = tmp.path().join("grid");
    let res = run(
        &["grid", "--config", &cfg, "--dataset", "synthetic", "--subset", "100", "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["config.json", "results.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let rows = read_csv(&out.join("results.csv")).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.tau_f == r.tau_b));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["cells"], 4);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), r#"{"run": {"epochs": 1, "seed": 3}, "workers": 2}"#);
    let out = tmp.path().join("train");
    let res = run(
        &[
            "train", "--config", &cfg, "--seed", "8", "--dataset", "synthetic", "--subset", "90", "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let echo: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["schema_version"], 1);
    assert_eq!(echo["run"]["seed"], 8);
    assert_eq!(echo["run"]["epochs"], 1);
    assert_eq!(echo["workers"], 2);
    assert_eq!(echo["run"]["dataset"]["id"], "synthetic");
    assert_eq!(echo["run"]["dataset"]["subset"], 90);
    for f in ["checkpoint.bin", "curve.csv", "results.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

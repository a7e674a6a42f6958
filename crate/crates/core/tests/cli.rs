use std::path::Path;
use std::process::{Command, Output};

use msmf::experiment::RunConfig;

fn msmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msmf"))
        .args(args)
        .env("MSMF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> String {
    let mut run = RunConfig::default();
    run.data.synthetic.n_samples = 300;
    run.data.synthetic.window = 8;
    run.data.window = 8;
    run.model.d_e = 4;
    run.model.d_a = 4;
    run.model.d_h = 6;
    run.model.coarse_window = 4;
    run.train.epochs = 2;
    run.completion.epochs = 2;
    let file = dir.join("config.json");
    std::fs::write(&file, run.to_json()).unwrap();
    path(&file).to_owned()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(msmf(&["--help"]).status.code(), Some(0));
    assert_eq!(msmf(&["ablate", "--help"]).status.code(), Some(0));
    assert_eq!(msmf(&["nonsense"]).status.code(), Some(1));
    assert_eq!(msmf(&["train"]).status.code(), Some(1));
}

#[test]
fn config_and_data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"unknown": 1}}"#).unwrap();
    let out = msmf(&["gradcheck", "--config", path(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown"));

    let missing = dir.path().join("nothing");
    let out = msmf(&["eval", "--model", path(&missing), "--data", path(&missing)]);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_msmf"))
        .args(["gradcheck"])
        .env("MSMF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_and_passes() {
    let out = msmf(&["gradcheck", "--config", "default"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("max relative error"));
}

#[test]
fn pipeline_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let data = dir.path().join("data");
    let model = dir.path().join("m.json");
    let gen = msmf(&["gen-data", "--out", path(&data), "--seed", "5", "--samples", "300", "--missing-rate", "0.2", "--config", &config]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(data.join("config.json").exists());

    let train = msmf(&["train", "--config", &config, "--data", path(&data), "--out", path(&model)]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let history = std::fs::read_to_string(dir.path().join("m.json.history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss"));
    assert_eq!(history.lines().count(), 3);
    assert!(dir.path().join("m.json.config.json").exists());

    let eval = msmf(&["eval", "--model", path(&model), "--data", path(&data)]);
    assert!(eval.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(metrics.as_object().unwrap().len(), 4);
}

#[test]
fn gates_ablation_renders_both_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let data = dir.path().join("data");
    assert!(msmf(&["gen-data", "--out", path(&data), "--seed", "3", "--samples", "300", "--config", &config]).status.success());

    let report = dir.path().join("gates.md");
    let out = msmf(&["ablate", "--suite", "gates", "--config", &config, "--data", path(&data), "--seeds", "1", "--out", path(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = std::fs::read_to_string(&report).unwrap();
    let labels: Vec<&str> = md
        .lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("| Method") && !l.starts_with("| ---"))
        .map(|l| l.split(" | ").next().unwrap().trim_start_matches("| "))
        .collect();
    assert_eq!(labels, ["Without (MG Gates)", "With (MG Gates)"]);

    let csv = dir.path().join("impute.csv");
    let out = msmf(&["impute-bench", "--config", &config, "--data", path(&data), "--seeds", "1", "--out", path(&csv), "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("Method,Accuracy (%),F1 Score (%),MAPE,RMSE"));
    assert_eq!(text.lines().count(), 6);

    let bad = msmf(&["ablate", "--suite", "nope", "--config", &config, "--data", path(&data), "--out", path(&report)]);
    assert_eq!(bad.status.code(), Some(2));
}

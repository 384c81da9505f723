use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "seed": 11,
  "data": {"n_stocks": 20, "start": "2013-01-01", "end": "2016-06-30"},
  "split": {"train_end": "2014-12-31", "val_end": "2015-06-30"},
  "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "max_len": 40},
  "pretrain": {"steps": 10, "batch": 4, "warmup": 2},
  "finetune": {"epochs": 1, "batch_size": 16, "peak_lr": 1e-3, "warmup_steps": 2}
}"#;

const STAGES: [&str; 7] = ["gen-data", "pretrain", "finetune", "predict", "evaluate", "backtest", "report"];

fn newsret(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_newsret"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stage(command: &str, config: &Path) -> Output {
    newsret(&[command, "--config", config.to_str().unwrap()])
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn all_stages_succeed_and_report_lists_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    for s in STAGES {
        let out = stage(s, &config);
        assert_eq!(out.status.code(), Some(0), "{s}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out_dir = dir.path().join("out");
    let report = fs::read_to_string(out_dir.join("report.md")).unwrap();

    let decile_rows = report.lines().filter(|l| l.starts_with("| ") && l[2..].starts_with(char::is_numeric)).count();
    assert_eq!(decile_rows, 10);
    for name in ["universe_equal_weight", "model_forecast", "sentiment_score"] {
        assert!(report.contains(&format!("| {name} |")), "{name}");
    }

    let mut on_disk: Vec<String> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    on_disk.sort();
    let listed: Vec<String> = report
        .lines()
        .filter_map(|l| l.strip_prefix("- `").and_then(|l| l.strip_suffix('`')))
        .map(str::to_string)
        .collect();
    assert_eq!(listed, on_disk);
}

#[test]
fn predict_without_checkpoint_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    assert_eq!(stage("gen-data", &config).status.code(), Some(0));
    let out = stage("predict", &config);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.contains("forecaster.params.json"), "{err}");
}

#[test]
fn report_on_partial_run_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    assert_eq!(stage("report", &config).status.code(), Some(3));
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(newsret(&[]).status.code(), Some(1));
    assert_eq!(newsret(&["train", "--config", "x.json"]).status.code(), Some(1));

    let no_seed = write_config(dir.path(), r#"{"pretrain": {"steps": 3}}"#);
    assert_eq!(stage("gen-data", &no_seed).status.code(), Some(1));

    let bad_split = write_config(
        dir.path(),
        r#"{"seed": 1, "split": {"train_end": "2016-01-01", "val_end": "2015-01-01"}}"#,
    );
    assert_eq!(stage("gen-data", &bad_split).status.code(), Some(1));
}

#[test]
fn configured_input_must_exist() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"seed": 1, "paths": {"news": "missing.jsonl"}}"#);
    assert_eq!(stage("pretrain", &config).status.code(), Some(3));
}

#[test]
fn malformed_universe_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("universe.csv"), "date,stock_id,forward_return\n2015-01-30,AAA,abc\n").unwrap();
    fs::write(dir.path().join("forecasts.csv"), "date,stock_id,forecast\n").unwrap();
    let config = write_config(
        dir.path(),
        r#"{"seed": 1, "paths": {"universe": "universe.csv", "out": "."}}"#,
    );
    let out = stage("evaluate", &config);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let c = config.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(newsret(&["gen-data", "--config", c, "--out", a.to_str().unwrap()]).status.success());
    assert!(newsret(&["gen-data", "--config", c, "--out", b.to_str().unwrap(), "--seed", "12"]).status.success());
    let ua = fs::read(a.join("universe.csv")).unwrap();
    let ub = fs::read(b.join("universe.csv")).unwrap();
    assert_ne!(ua, ub);
}

#[test]
fn shipped_demo_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.json");
    let config = newsret_cli::RunConfig::load(&path).unwrap();
    assert_eq!(config.seed, 2024);
}

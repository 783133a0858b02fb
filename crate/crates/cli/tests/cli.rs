use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use echo_imager::experiments::Strategy;
use echo_imager_cli::config::{Experiment, ScenarioConfig};
use proptest::prelude::*;
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echo-imager"))
        .current_dir(dir)
        .env_remove("ECHO_IMAGER_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let headers = reader.headers().unwrap().iter().map(String::from).collect();
    let rows = reader.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (headers, rows)
}

#[test]
fn table1_without_oracle_writes_every_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["table1", "--no-oracle", "--n-s", "1", "--rates", "0.01"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (headers, rows) = csv_rows(&tmp.path().join("out/table1.csv"));
    assert_eq!(headers[0], "task [text]");
    assert_eq!(rows.len(), 11);
    let ratio = headers.iter().position(|h| h == "ratio [1]").unwrap();
    for r in &rows {
        let v: f64 = r[ratio].parse().unwrap();
        assert!((v - 1.0).abs() < 0.02, "{r:?}");
    }
    let s = summary(&tmp.path().join("out"));
    assert_eq!(s["results"]["coherent_below_optimal"], Value::Bool(true));
}

#[test]
fn sweep_config_writes_units_and_crlf() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::new(Experiment::RayleighSweep);
    cfg.sweep.d_over_sigma = vec![0.05, 0.1];
    cfg.sweep.strategies = vec![Strategy::Direct, Strategy::Spade];
    cfg.run.trials = 100_000;
    cfg.run.replications = 4;
    let path = tmp.path().join("sweep.json");
    fs::write(&path, cfg.to_json()).unwrap();
    let out = run(tmp.path(), &["--config", "sweep.json", "run", "--out", "res"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("res/sweep.csv")).unwrap();
    assert!(text.contains("\r\n"));
    let (headers, rows) = csv_rows(&tmp.path().join("res/sweep.csv"));
    assert_eq!(
        headers,
        ["d_over_sigma [1]", "strategy [text]", "fi_analytic [1/trial]", "fi_numeric [1/trial]", "mle_variance [sigma^2]", "crb [sigma^2]"]
    );
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let variance: f64 = r[4].parse().unwrap();
        assert!(variance.is_finite() && variance >= 0.0);
    }
}

#[test]
fn noise_matrix_reproduces_robustness_pattern() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["noise-matrix"]);
    assert!(out.status.success());
    let (_, rows) = csv_rows(&tmp.path().join("out/noise_matrix.csv"));
    assert_eq!(rows.len(), 9);
    let pattern: Vec<(String, String, String, String)> =
        rows.iter().map(|r| (r[0].clone(), r[1].clone(), r[4].clone(), r[5].clone())).collect();
    for (probe, source, abs, fl) in &pattern {
        let expected = match (probe.as_str(), source.as_str()) {
            ("squeezed_vacuum", _) | (_, "additive") => ("false", "false"),
            (_, "loss") => ("false", "true"),
            (_, "heating") => ("true", "false"),
            other => panic!("unexpected cell {other:?}"),
        };
        assert_eq!((abs.as_str(), fl.as_str()), expected, "{probe}/{source}");
    }
}

#[test]
fn invalid_sigma_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::new(Experiment::Fisher);
    cfg.scene.sigma = -1.0;
    fs::write(tmp.path().join("bad.json"), cfg.to_json()).unwrap();
    let out = run(tmp.path(), &["--config", "bad.json", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["category"], "config");
    assert_eq!(err["path"], "scene.sigma");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn malformed_config_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.json"), "{\n  \"version\": 1,\n  \"experiment\": \"fisher\",\n  \"run\": { \"trials\": \"many\" }\n}\n").unwrap();
    let out = run(tmp.path(), &["--config", "bad.json", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["path"], "run.trials");
    assert!(err["message"].as_str().unwrap().contains("line 4"));
}

#[test]
fn run_without_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn summary_records_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["fisher", "--seed", "17"]);
    assert!(out.status.success());
    let s = summary(&tmp.path().join("out"));
    assert_eq!(s["seed"], 17);
    assert_eq!(s["config"]["run"]["seed"], 17);
    assert_eq!(s["config_hash"].as_str().unwrap().len(), 64);
    assert!(!s["version"].as_str().unwrap().is_empty());
    assert_eq!(s["rng"], "ChaCha8");
    let cfg = ScenarioConfig::from_json(&s["config"].to_string()).unwrap();
    assert_eq!(cfg.hash(), s["config_hash"].as_str().unwrap());
}

#[test]
fn json_format_writes_json_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["fisher", "--format", "json"]);
    assert!(out.status.success());
    let t: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/fisher.json")).unwrap()).unwrap();
    assert_eq!(t["name"], "fisher");
    assert!(!t["rows"].as_array().unwrap().is_empty());
    assert!(!tmp.path().join("out/fisher.csv").exists());
}

#[test]
fn output_directory_falls_back_to_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::new(Experiment::NoiseStudy);
    cfg.run.output = Some("from_config".into());
    fs::write(tmp.path().join("c.json"), cfg.to_json()).unwrap();
    assert!(run(tmp.path(), &["--config", "c.json", "run"]).status.success());
    assert!(tmp.path().join("from_config/noise_matrix.csv").exists());
}

#[test]
fn thread_count_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_echo-imager"))
        .current_dir(tmp.path())
        .env("ECHO_IMAGER_THREADS", "3")
        .arg("noise-matrix")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(summary(&tmp.path().join("out"))["threads"], 3);
    let flag = run(tmp.path(), &["noise-matrix", "--threads", "2", "--out", "flag"]);
    assert!(flag.status.success());
    assert_eq!(summary(&tmp.path().join("flag"))["threads"], 2);
}

#[test]
fn same_seed_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["sweep", "--strategy", "spade", "--d", "0.1", "--trials", "10000", "--replications", "3", "--seed", "5"];
    assert!(run(tmp.path(), &[&args[..], &["--out", "a"]].concat()).status.success());
    assert!(run(tmp.path(), &[&args[..], &["--out", "b"]].concat()).status.success());
    let a = fs::read(tmp.path().join("a/sweep.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/sweep.csv")).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(
        seed in any::<u64>(),
        trials in 1u64..10_000_000,
        sigma in 0.1f64..10.0,
        d in prop::collection::vec(0.001f64..1.0, 1..6),
        emission in 1e-4f64..0.4,
    ) {
        let mut cfg = ScenarioConfig::new(Experiment::RayleighSweep);
        cfg.run.seed = seed;
        cfg.run.trials = trials;
        cfg.scene.sigma = sigma;
        cfg.scene.emission = emission;
        cfg.sweep.d_over_sigma = d;
        let text = cfg.to_json();
        let back = ScenarioConfig::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json(), text);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

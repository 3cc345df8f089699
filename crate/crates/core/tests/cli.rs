use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use exposure_lab::harness::{run_experiment, ExperimentConfig, RepetitionRecord};

const BIN: &str = env!("CARGO_BIN_EXE_exposure-lab");

fn tiny_json(seed: u64, extra: &str) -> String {
    format!(
        r#"{{
  "seed": {seed},
  "n_users": 30,
  "n_items": 24,
  "size_a": 12,
  "n_bias": 2,
  "sessions": {{"uniform_a": 4, "uniform_b": 3, "overexpose_bias": 3, "compete_popular": 3, "compete_unpopular": 3, "competition_anchor": 2}},
  "target_ratio": 2.0,
  "quartile_size": 4,
  "n_nests": 3,
  "models": ["mnl", "bpr", "random"],
  "hyper": {{"dim": 2, "epochs": 5}},
  "n_repetitions": 3,
  "n_null": 2{extra}
}}"#
    )
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_records(dir: &Path) -> Vec<RepetitionRecord> {
    fs::read_to_string(dir.join("results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn run_writes_every_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_json(1, ""));
    let out = tmp.path().join("out");
    let o = run(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "results.jsonl", "reports.jsonl", "summary.csv", "plotdata_bias.csv", "plotdata_ndcg.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(read_records(&out).len(), 3 * 2 * 3 * 2);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next().unwrap(), "experiment,model,corrected_bias,ci_low,ci_high,ndcg_treated,ndcg_control");
    assert_eq!(lines.count(), 2 * 3);
    assert_eq!(fs::read_to_string(out.join("plotdata_bias.csv")).unwrap().lines().next().unwrap(), "experiment,model,mean,ci_low,ci_high");
}

#[test]
fn refuses_non_empty_output_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_json(2, ""));
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(run(&["run", "--config", &cfg, "--out", out]).status.code(), Some(0));
    let again = run(&["run", "--config", &cfg, "--out", out]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(run(&["run", "--config", &cfg, "--out", out, "--force"]).status.code(), Some(0));
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_json(3, ""));
    let first = tmp.path().join("first");
    assert_eq!(run(&["run", "--config", &cfg, "--out", first.to_str().unwrap()]).status.code(), Some(0));
    let manifest = tmp.path().join("manifest-copy.json");
    fs::copy(first.join("manifest.json"), &manifest).unwrap();
    let second = tmp.path().join("second");
    let o = run(&["run", "--config", manifest.to_str().unwrap(), "--out", second.to_str().unwrap(), "--workers", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "results.jsonl", "reports.jsonl", "summary.csv", "plotdata_bias.csv", "plotdata_ndcg.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing_seed = write_config(tmp.path(), "a.json", "{}");
    let no_models = write_config(tmp.path(), "b.json", &tiny_json(1, r#", "models": []"#).replace(r#""models": ["mnl", "bpr", "random"],"#, ""));
    let bad_ratio = write_config(tmp.path(), "c.json", &tiny_json(1, "").replace("\"target_ratio\": 2.0", "\"target_ratio\": 40.0"));
    for cfg in [&missing_seed, &no_models, &bad_ratio] {
        assert_eq!(run(&["validate", "--config", cfg]).status.code(), Some(2), "{cfg}");
        let out = tmp.path().join("never");
        assert_eq!(run(&["run", "--config", cfg, "--out", out.to_str().unwrap()]).status.code(), Some(2), "{cfg}");
        assert!(!out.exists());
    }
    let good = write_config(tmp.path(), "d.json", &tiny_json(1, ""));
    assert_eq!(run(&["validate", "--config", &good]).status.code(), Some(0));
    assert_eq!(run(&["solve-rho", "--ratio", "0.5"]).status.code(), Some(2));
}

#[test]
fn poisoned_repetition_is_isolated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "p.json", &tiny_json(4, r#", "poison_repetition": 1"#));
    let out = tmp.path().join("out");
    let o = run(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let poisoned = read_records(&out);
    let clean = run_experiment(&ExperimentConfig::from_json(&tiny_json(4, "")).unwrap(), 1).unwrap();
    assert_eq!(poisoned.len(), clean.records.len());
    for (p, c) in poisoned.iter().zip(&clean.records) {
        if p.repetition == 1 {
            assert_eq!(p.status, "failed");
            assert!(p.error.is_some());
        } else {
            assert_eq!(p, c);
        }
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let config = ExperimentConfig::from_json(&tiny_json(5, "")).unwrap();
    let one = run_experiment(&config, 1).unwrap();
    let four = run_experiment(&config, 4).unwrap();
    assert_eq!(one, four);
}

#[test]
fn check_gradients_and_solve_rho() {
    let o = run(&["check-gradients", "--kind", "gev", "--runs", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("gev: max relative error"));
    let o = run(&["solve-rho", "--ratio", "3.2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("rho = 0.7683"));
}

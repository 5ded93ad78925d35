use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use longfair::commands::ReplicateFile;
use longfair::evaluate::mean_std;
use longfair::io::sha256_hex;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_longfair");

fn longfair(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Writes the reference config shrunk to test size; returns its path.
fn small_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let out = dir.join("out");
    let text = ok(&longfair(&["init-config", "--output-dir", out.to_str().unwrap()]));
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    cfg["datagen"]["n_individuals"] = 400.into();
    cfg["training"]["rrm"]["mc_samples"] = 800.into();
    cfg["eval"]["n"] = 800.into();
    cfg["sensitivity"]["n"] = 300.into();
    edit(&mut cfg);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(name)).unwrap()
}

fn digest(dir: &Path, name: &str) -> String {
    sha256_hex(&std::fs::read(dir.join("out").join(name)).unwrap())
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let text = ok(&longfair(&["--config", cfg.to_str().unwrap(), "--dry-run", "generate"]));
    assert!(text.contains("configuration ok"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_configs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |c| c["datagen"]["steps"] = 3.into());
    let out = longfair(&["--config", cfg.to_str().unwrap(), "generate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));
    let cfg = small_config(dir.path(), |c| c["datagen"]["colour"] = "blue".into());
    assert!(!longfair(&["--config", cfg.to_str().unwrap(), "generate"]).status.success());
}

#[test]
fn reference_panel_shape_and_rerun_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |c| c["datagen"]["n_individuals"] = 5000.into());
    let cfg = cfg.to_str().unwrap();
    ok(&longfair(&["--config", cfg, "generate"]));
    let first = digest(dir.path(), "panel.jsonl");
    let manifest: Value = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["individuals"], 5000);
    assert_eq!(manifest["steps"], 5);
    let panel = read(dir.path(), "panel.jsonl");
    assert_eq!(panel.lines().count(), 5001);
    ok(&longfair(&["--config", cfg, "generate"]));
    assert_eq!(first, digest(dir.path(), "panel.jsonl"));
    ok(&longfair(&["--config", cfg, "--seed", "1", "generate"]));
    assert_ne!(first, digest(dir.path(), "panel.jsonl"));
}

#[test]
fn train_evaluate_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let cfg = cfg.to_str().unwrap();
    ok(&longfair(&["--config", cfg, "generate"]));

    ok(&longfair(&["--config", cfg, "train", "--baselines-only"]));
    assert!(!dir.path().join("out/trace.jsonl").exists());
    assert!(dir.path().join("out/models/LR.json").exists());

    ok(&longfair(&["--config", cfg, "train", "--max-outer-iters", "1"]));
    let trace = read(dir.path(), "trace.jsonl");
    assert_eq!(trace.lines().count(), 3, "header, one record, summary");

    let text = ok(&longfair(&["--config", cfg, "train"]));
    assert!(text.contains("converged at iteration"), "{text}");
    let trace = read(dir.path(), "trace.jsonl");
    let summary: Value = serde_json::from_str(trace.lines().last().unwrap()).unwrap();
    assert_eq!(summary["converged"], true);

    let table = ok(&longfair(&["--config", cfg, "evaluate"]));
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 13);
    assert!(rows.iter().all(|l| l.split(',').count() == 7));

    let header: Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    let hash = header["config_hash"].as_str().unwrap().to_string();
    for name in ["convergence.csv", "table.csv"] {
        let first = read(dir.path(), name).lines().next().unwrap().to_string();
        assert_eq!(first, format!("# config_hash={hash} seed=0"), "{name}");
    }
    for name in ["manifest.json", "replicates.json", "models/RRM.json"] {
        let v: Value = serde_json::from_str(&read(dir.path(), name)).unwrap();
        assert_eq!(v["config_hash"], hash.as_str(), "{name}");
        assert_eq!(v["seed"], 0, "{name}");
    }
}

#[test]
fn replicate_table_matches_per_replicate_moments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |c| c["training"]["run_rrm"] = false.into());
    let cfg = cfg.to_str().unwrap();
    ok(&longfair(&["--config", cfg, "generate"]));
    ok(&longfair(&["--config", cfg, "train"]));
    ok(&longfair(&["--config", cfg, "evaluate", "--replicates", "5"]));
    let reps: ReplicateFile = serde_json::from_str(&read(dir.path(), "replicates.json")).unwrap();
    let table = read(dir.path(), "table.csv");
    let lr: Vec<&[f64]> = reps.reports.iter().filter(|r| r.algorithm == "LR").map(|r| r.accuracy.as_slice()).collect();
    assert_eq!(lr.len(), 5);
    // Sample moments recomputed from scratch.
    let h = lr[0].len();
    let mean: Vec<f64> = (0..h).map(|t| lr.iter().map(|r| r[t]).sum::<f64>() / 5.0).collect();
    let std: Vec<f64> = (0..h).map(|t| (lr.iter().map(|r| (r[t] - mean[t]).powi(2)).sum::<f64>() / 4.0).sqrt()).collect();
    let (m2, s2) = mean_std(&lr);
    for t in 0..h {
        assert!((mean[t] - m2[t]).abs() < 1e-12 && (std[t] - s2[t]).abs() < 1e-12);
    }
    let row = table.lines().find(|l| l.starts_with("LR,accuracy")).unwrap();
    let expected: Vec<String> = mean.iter().chain(&std).map(|v| format!("{v:.3}")).collect();
    assert_eq!(row, format!("LR,accuracy,{}", expected.join(",")));
    assert!(table.lines().nth(1).unwrap().ends_with("t5_std"));
}

#[test]
fn sweep_deduplicates_and_frozen_dynamics_collapse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = longfair(&["--config", cfg.to_str().unwrap(), "sweep", "--eps", "0.0,0.0"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate eps"));
    let sweep = read(dir.path(), "sweep.csv");
    let rows: Vec<&str> = sweep.lines().skip(2).collect();
    assert!(!rows.is_empty() && rows.len() <= 2, "{sweep}");
    assert!(rows.iter().all(|r| r.starts_with("0,") && r.ends_with(",converged")));
}

#[test]
fn sensitivity_report_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let cfg = cfg.to_str().unwrap();
    ok(&longfair(&["--config", cfg, "generate"]));
    ok(&longfair(&["--config", cfg, "sensitivity"]));
    let v: Value = serde_json::from_str(&read(dir.path(), "sensitivity.json")).unwrap();
    let r = &v["report"];
    for key in ["gamma_hat", "beta_hat", "c_hat", "eps_hat", "m"] {
        assert!(r[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert!(r["beta_hat"].as_f64().unwrap() >= r["gamma_hat"].as_f64().unwrap());
    assert!((r["m"].as_f64().unwrap() - 12.0 * 2f64.sqrt()).abs() < 1e-12);
}

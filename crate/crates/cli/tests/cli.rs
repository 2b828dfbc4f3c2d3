use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn nowcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A few-hour toy world with a handful of training steps.
fn tiny_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let toy = data_dir().join("toy");
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(toy.join("config.json")).unwrap()).unwrap();
    for key in ["catalog", "footprints", "regions"] {
        let rel = cfg["paths"][key].as_str().unwrap().to_string();
        cfg["paths"][key] = json!(toy.join(rel).canonicalize().unwrap());
    }
    cfg["paths"]["out"] = json!(dir.join("out"));
    cfg["splits"] = json!({
        "train": {"start": "2023-01-01T03:00:00Z", "end": "2023-01-01T06:00:00Z", "every_steps": 2},
        "threshold": {"start": "2023-01-01T07:00:00Z", "end": "2023-01-01T08:00:00Z", "every_steps": 2},
        "test": {"start": "2023-01-01T09:00:00Z", "end": "2023-01-01T10:00:00Z", "every_steps": 2}
    });
    cfg["training"]["steps"] = json!(6);
    cfg["training"]["batch_size"] = json!(2);
    cfg["training"]["log_every"] = json!(2);
    cfg["training"]["leads_min"] = json!([15, 30]);
    cfg["evaluation"]["fss_sizes"] = json!([1, 3]);
    edit(&mut cfg);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn mosaic_plan_prints_eighteen_mosaics_deterministically() {
    let catalog = data_dir().join("catalog/geostationary_bands.json");
    let a = nowcast(&["mosaic-plan", catalog.to_str().unwrap()]);
    let b = nowcast(&["mosaic-plan", catalog.to_str().unwrap()]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let plan: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(plan["mosaics"].as_array().unwrap().len(), 18);

    let dir = TempDir::new().unwrap();
    let o = nowcast(&["mosaic-plan", catalog.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(dir.path().join("plans/mosaic_plan.json")).unwrap(), a.stdout);
}

#[test]
fn empty_catalog_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("empty.json");
    std::fs::write(&path, "").unwrap();
    let o = nowcast(&["mosaic-plan", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn overlapping_splits_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), |c| {
        c["splits"]["threshold"]["start"] = json!("2023-01-01T05:00:00Z");
    });
    let o = nowcast(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn stage_without_upstream_names_the_missing_stage() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), |_| {});
    let o = nowcast(&["run", "--config", cfg.to_str().unwrap(), "--stage", "train"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("preprocess"), "{}", stderr(&o));
}

#[test]
fn unknown_switch_and_stage_are_validation_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), |_| {});
    let o = nowcast(&["ablate", "--config", cfg.to_str().unwrap(), "--ablate", "drop-everything"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = nowcast(&["run", "--config", cfg.to_str().unwrap(), "--stage", "deploy"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn empty_switch_list_writes_header_only_report() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), |_| {});
    let o = nowcast(&["ablate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = nowcast_cli::read_ablation(&nowcast_cli::ablation_path(&dir.path().join("out"))).unwrap();
    assert!(rows.is_empty());
}

#[test]
fn non_finite_training_exits_four() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), |c| {
        c["training"]["learning_rate"] = json!(1e38);
    });
    let o = nowcast(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn full_run_then_rerun_is_cached_and_ablation_variant_completes() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), |_| {});
    let cfg = cfg.to_str().unwrap();
    let first = nowcast(&["run", "--config", cfg]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let out = dir.path().join("out");
    for f in ["metrics.csv", "inference_check.json", "csi_domain_0.2.svg"] {
        assert!(out.join("reports/full").join(f).is_file(), "{f}");
    }
    assert!(out.join("checkpoints/full/model.json").is_file());
    assert!(out.join("thresholds/full/thresholds.json").is_file());

    let second = nowcast(&["run", "--config", cfg]);
    assert_eq!(code(&second), 0);
    let log = stderr(&second);
    assert_eq!(log.lines().filter(|l| l.contains("cached")).count(), 5, "{log}");

    let aux = nowcast(&["run", "--config", cfg, "--ablate", "drop-dense-aux"]);
    assert_eq!(code(&aux), 0, "{}", stderr(&aux));
    assert!(out.join("reports/ablate-drop-dense-aux/metrics.csv").is_file());
    assert!(!out.join(".nowcast.lock").exists());
}

//! Command-line driver: mosaic planning, the staged toy pipeline with
//! content-addressed caching, reproducibility checks and ablations.

pub mod cache;
pub mod config;
pub mod error;
pub mod stages;
pub mod world;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nowcast_core::mosaic::{plan_mosaics, MosaicPlan};
use nowcast_core::verify::{read_report_csv, Flag, ReportRow};
use serde::{Deserialize, Serialize};

use crate::cache::{list_files, sha256_file, OutputLock};
use crate::config::{RunConfig, Switch};
use crate::error::{CliError, Result};
use crate::stages::{Ctx, Layout, Outcome, Stage};

pub use error::CliError as Error;

/// Caps the worker pool from `NOWCAST_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NOWCAST_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::validation(format!("NOWCAST_THREADS={v:?} is not a positive integer")))?;
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Plans mosaics for a band catalog; optionally writes the plan under
/// `<out>/plans`.
pub fn cmd_mosaic_plan(catalog: &Path, out: Option<&Path>) -> Result<MosaicPlan> {
    let text = fs::read_to_string(catalog)
        .map_err(|e| CliError::validation(format!("cannot read catalog {}: {e}", catalog.display())))?;
    if text.trim().is_empty() {
        return Err(CliError::validation(format!("catalog {} is empty", catalog.display())));
    }
    let bands: Vec<nowcast_core::mosaic::Band> = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("catalog {}: {e}", catalog.display())))?;
    let plan = plan_mosaics(&bands)?;
    if let Some(out) = out {
        let dir = out.join("plans");
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("mosaic_plan.json"), plan_json(&plan)?)?;
    }
    Ok(plan)
}

pub fn plan_json(plan: &MosaicPlan) -> Result<String> {
    Ok(serde_json::to_string_pretty(plan)? + "\n")
}

/// Options shared by `run` and `ablate`.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path, opts: &RunOptions) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.paths.out = o.clone();
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out: PathBuf,
    pub variant: String,
    pub outcomes: Vec<Outcome>,
    pub repro: Option<ReproReport>,
}

/// Runs the selected stages. With `verify_repro`, reruns every stage from
/// scratch in a scratch directory and compares artifact checksums.
pub fn cmd_run(cfg: &RunConfig, stage: &str, switches: &[Switch], verify_repro: bool) -> Result<RunSummary> {
    let stages = Stage::select(stage)?;
    let out = cfg.paths.out.clone();
    let _lock = OutputLock::acquire(&out)?;
    let ctx = Ctx::new(cfg.clone(), switches.to_vec(), &out)?;
    let outcomes = ctx.run(&stages)?;
    let repro = if verify_repro { Some(verify_repro_run(&ctx)?) } else { None };
    Ok(RunSummary { out, variant: ctx.layout.variant.clone(), outcomes, repro })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub identical: bool,
    pub files_compared: usize,
    pub mismatched: Vec<String>,
}

/// Artifacts of one variant: shared data and plans plus its own
/// checkpoints, thresholds and reports.
fn variant_files(layout: &Layout) -> Result<BTreeMap<String, String>> {
    let dirs = [layout.plans(), layout.out.join("data"), layout.checkpoints(), layout.thresholds(), layout.reports()];
    let mut out = BTreeMap::new();
    for d in dirs {
        for rel in list_files(&layout.out, &d)? {
            if rel.ends_with("repro.json") || rel.ends_with("mosaic_plan.json") && !rel.ends_with("world_mosaic_plan.json") {
                continue;
            }
            out.insert(rel.clone(), sha256_file(&layout.out.join(&rel))?);
        }
    }
    Ok(out)
}

fn verify_repro_run(ctx: &Ctx) -> Result<ReproReport> {
    let scratch = tempfile::Builder::new().prefix("nowcast-repro").tempdir()?;
    let fresh = Ctx::new(ctx.cfg.clone(), ctx.switches.clone(), scratch.path())?;
    fresh.run(&Stage::ALL)?;
    let a = variant_files(&ctx.layout)?;
    let b = variant_files(&fresh.layout)?;
    let mut mismatched: Vec<String> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).cloned().collect();
    mismatched.sort();
    mismatched.dedup();
    let report = ReproReport { identical: mismatched.is_empty(), files_compared: a.len().max(b.len()), mismatched };
    fs::create_dir_all(ctx.layout.reports())?;
    fs::write(ctx.layout.reports().join("repro.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    if !report.identical {
        return Err(CliError::Repro(format!("{} artifacts differ: {:?}", report.mismatched.len(), report.mismatched)));
    }
    Ok(report)
}

/// One model CSI comparison between the full and an ablated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub switch: String,
    pub region: String,
    pub rate_mm_hr: f64,
    pub lead_min: u32,
    pub csi_full: f64,
    pub csi_ablated: f64,
    pub delta_csi: f64,
}

pub const ABLATION_HEADER: &str = "# ablated inputs are zeroed at assembly with the channel count kept; \
this differs from retraining without the input and magnitudes are not comparable to full-scale studies";

pub fn ablation_path(out: &Path) -> PathBuf {
    out.join("reports").join("ablation.csv")
}

/// Trains and evaluates the full run (cached when current) and one ablated
/// run per switch, then writes the delta-CSI report.
pub fn cmd_ablate(cfg: &RunConfig, switches: &[Switch]) -> Result<Vec<AblationRow>> {
    let out = cfg.paths.out.clone();
    let _lock = OutputLock::acquire(&out)?;
    let mut rows = Vec::new();
    if !switches.is_empty() {
        let full = Ctx::new(cfg.clone(), Vec::new(), &out)?;
        full.run(&Stage::ALL)?;
        let base = model_csi(&full.layout.metrics_path())?;
        for &s in switches {
            let ctx = Ctx::new(cfg.clone(), vec![s], &out)?;
            ctx.run(&Stage::ALL)?;
            let abl = model_csi(&ctx.layout.metrics_path())?;
            for (key, &full_v) in &base {
                let Some(&abl_v) = abl.get(key) else { continue };
                rows.push(AblationRow {
                    switch: s.name().into(),
                    region: key.0.clone(),
                    rate_mm_hr: f64::from_bits(key.1),
                    lead_min: key.2,
                    csi_full: full_v,
                    csi_ablated: abl_v,
                    delta_csi: abl_v - full_v,
                });
            }
        }
    }
    let path = ablation_path(&out);
    fs::create_dir_all(path.parent().unwrap())?;
    let mut f = fs::File::create(&path)?;
    writeln!(f, "{ABLATION_HEADER}")?;
    let mut w = csv::Writer::from_writer(f);
    if rows.is_empty() {
        w.write_record(["switch", "region", "rate_mm_hr", "lead_min", "csi_full", "csi_ablated", "delta_csi"])
            .map_err(anyhow::Error::from)?;
    }
    for r in &rows {
        w.serialize(r).map_err(anyhow::Error::from)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Reads an ablation report, skipping its comment header.
pub fn read_ablation(path: &Path) -> Result<Vec<AblationRow>> {
    let text = fs::read_to_string(path)?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let rows = r.deserialize().collect::<std::result::Result<Vec<AblationRow>, _>>().map_err(anyhow::Error::from)?;
    Ok(rows)
}

type CsiKey = (String, u64, u32);

/// Defined model CSI values keyed by (region, rate bits, lead).
pub fn model_csi(metrics: &Path) -> Result<BTreeMap<CsiKey, f64>> {
    let rows = read_metrics(metrics)?;
    Ok(rows
        .into_iter()
        .filter(|r| r.model == "model" && r.metric == "csi" && r.defined_flag == Flag::Defined)
        .map(|r| ((r.region, r.rate_mm_hr.to_bits(), r.lead_min), r.value))
        .collect())
}

pub fn read_metrics(path: &Path) -> Result<Vec<ReportRow>> {
    let f = fs::File::open(path).map_err(|_| CliError::Missing {
        stage: "report".into(),
        what: format!("metrics file {}", path.display()),
    })?;
    Ok(read_report_csv(f)?)
}

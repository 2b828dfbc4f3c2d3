//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use nowcast_core::calibrate::RateSet;
use nowcast_core::geogrid::{degrees_to_pixels, Geometry};
use nowcast_core::pipeline::{RateBinning, SourceSpec};
use nowcast_core::synthdata::{SceneParams, SwathParams};
use nowcast_core::verify::LatencySpec;
use nowcast_model::config::INITIAL_FOLD;
use nowcast_model::{HeadSpec, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MOSAICS: &str = "mosaics";
pub const RADAR: &str = "radar";
pub const NWP: &str = "nwp";
pub const MAIN_HEAD: &str = "main";
pub const AUX_HEAD: &str = "aux";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub catalog: PathBuf,
    pub footprints: PathBuf,
    pub regions: PathBuf,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NwpParams {
    pub latency: LatencySpec,
    /// Box-blur passes applied at coarse resolution.
    pub blur_passes: usize,
    /// Displacement error growth, coarse pixels per hour of forecast age.
    pub drift_px_per_hour: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldParams {
    pub epoch: DateTime<Utc>,
    pub step_min: i64,
    /// Truth scene; its `seed` is replaced by one derived from the run seed.
    pub scene: SceneParams,
    pub swath: SwathParams,
    /// Resolution of coarse products (NWP proxy, auxiliary target), degrees.
    pub coarse_res: f64,
    pub sensor_noise: f64,
    /// Radar coverage ends at this longitude.
    pub radar_lon_max: f64,
    pub nwp: NwpParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub start: DateTime<Utc>,
    /// Exclusive.
    pub end: DateTime<Utc>,
    pub every_steps: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Split,
    pub threshold: Split,
    pub test: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineParams {
    pub bins: usize,
    pub first_edge_mm_hr: f64,
    pub cap_mm_hr: f64,
    pub pad_degrees: f64,
    pub keep_empty_fraction: f64,
    pub sources: Vec<SourceSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub stage_channels: Vec<usize>,
    pub crop_per_stage: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    pub head_kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingParams {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub polyak_decay: f64,
    pub main_weight: f64,
    pub aux_weight: f64,
    pub leads_min: Vec<u32>,
    pub log_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationParams {
    pub rates: RateSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationParams {
    pub fss_sizes: Vec<usize>,
    pub model_latency: LatencySpec,
    /// Age of the newest truth frame used by persistence, minutes.
    pub persistence_age_min: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Switch {
    DropMosaics,
    DropNwpProxy,
    DropRadarProxy,
    DropDenseAux,
}

impl Switch {
    pub const ALL: [Switch; 4] = [Switch::DropMosaics, Switch::DropNwpProxy, Switch::DropRadarProxy, Switch::DropDenseAux];

    pub fn name(self) -> &'static str {
        match self {
            Switch::DropMosaics => "drop-mosaics",
            Switch::DropNwpProxy => "drop-nwp-proxy",
            Switch::DropRadarProxy => "drop-radar-proxy",
            Switch::DropDenseAux => "drop-dense-aux",
        }
    }

    pub fn parse(s: &str) -> Result<Switch> {
        Switch::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| CliError::validation(format!("unknown ablation switch {s:?}")))
    }

    /// Input source zeroed by this switch, if any.
    pub fn source(self) -> Option<&'static str> {
        match self {
            Switch::DropMosaics => Some(MOSAICS),
            Switch::DropNwpProxy => Some(NWP),
            Switch::DropRadarProxy => Some(RADAR),
            Switch::DropDenseAux => None,
        }
    }
}

/// Parses a comma-separated switch list; blanks are ignored.
pub fn parse_switches(list: &str) -> Result<Vec<Switch>> {
    let mut out: Vec<Switch> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(Switch::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationParams {
    pub switches: Vec<Switch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub world: WorldParams,
    pub splits: Splits,
    pub pipeline: PipelineParams,
    pub model: ModelParams,
    pub training: TrainingParams,
    pub calibration: CalibrationParams,
    pub evaluation: EvaluationParams,
    pub ablation: AblationParams,
}

impl Split {
    pub fn init_times(&self, step_min: i64) -> Vec<DateTime<Utc>> {
        let every = Duration::minutes(step_min * self.every_steps);
        let mut t = self.start;
        let mut out = Vec::new();
        while t < self.end {
            out.push(t);
            t += every;
        }
        out
    }
}

impl RunConfig {
    /// Reads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.catalog, &mut cfg.paths.footprints, &mut cfg.paths.regions, &mut cfg.paths.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn source(&self, name: &str) -> Result<&SourceSpec> {
        self.pipeline
            .sources
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| CliError::validation(format!("config lacks source {name}")))
    }

    pub fn binning(&self) -> RateBinning {
        RateBinning::geometric(self.pipeline.bins, self.pipeline.first_edge_mm_hr, self.pipeline.cap_mm_hr)
    }

    pub fn fine_geometry(&self) -> Geometry {
        self.world.scene.geometry
    }

    pub fn coarse_geometry(&self) -> Geometry {
        let g = self.fine_geometry();
        let n = (self.world.coarse_res / g.res).round() as usize;
        Geometry { res: self.world.coarse_res, height: g.height / n, width: g.width / n, ..g }
    }

    pub fn pad_px(&self, res: f64) -> Result<usize> {
        Ok(degrees_to_pixels(self.pipeline.pad_degrees, res)?)
    }

    pub fn input_channels(&self) -> usize {
        nowcast_core::pipeline::assembled_channel_count(&self.pipeline.sources)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let c = self.coarse_geometry();
        let pad = self.pad_px(c.res)?;
        let fine_ratio = (c.res / self.fine_geometry().res).round() as usize;
        let m = &self.model;
        let cfg = ModelConfig {
            input_height: c.height + 2 * pad,
            input_width: c.width + 2 * pad,
            input_channels: self.input_channels(),
            stages: m.stages,
            blocks_per_stage: m.blocks_per_stage,
            stage_channels: m.stage_channels.clone(),
            crop_per_stage: m.crop_per_stage,
            embed_dim: m.embed_dim,
            kernel: m.kernel,
            head_kernel: m.head_kernel,
            heads: vec![
                HeadSpec { name: MAIN_HEAD.into(), bins: self.pipeline.bins, upsample: fine_ratio },
                HeadSpec { name: AUX_HEAD.into(), bins: self.pipeline.bins, upsample: 1 },
            ],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Output geometries of the main and auxiliary heads.
    pub fn head_geometries(&self) -> [Geometry; 2] {
        [self.fine_geometry(), self.coarse_geometry()]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Validation(m));
        let w = &self.world;
        w.scene.validate()?;
        w.swath.validate()?;
        if w.step_min <= 0 {
            return bad("world.step_min must be positive".into());
        }
        let f = self.fine_geometry();
        let ratio = w.coarse_res / f.res;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() as usize != INITIAL_FOLD {
            return bad(format!("coarse resolution must be {INITIAL_FOLD}× the scene resolution"));
        }
        if f.height % INITIAL_FOLD != 0 || f.width % INITIAL_FOLD != 0 {
            return bad("scene size must be divisible by the fold factor".into());
        }
        if w.sensor_noise < 0.0 || w.nwp.drift_px_per_hour < 0.0 {
            return bad("noise and drift must be non-negative".into());
        }
        self.check_splits()?;
        for (name, fine) in [(MOSAICS, true), (RADAR, true), (NWP, false)] {
            let s = self.source(name)?;
            s.validate()?;
            if s.fine != fine {
                return bad(format!("source {name} must have fine = {fine}"));
            }
        }
        if self.pipeline.sources.len() != 3 {
            return bad("exactly the mosaics, radar and nwp sources are supported".into());
        }
        if self.source(RADAR)?.channels != 1 || self.source(NWP)?.channels != 1 {
            return bad("radar and nwp sources carry one channel".into());
        }
        self.binning().validate()?;
        let t = &self.training;
        if t.steps == 0 || t.batch_size == 0 || !(t.learning_rate > 0.0) || t.log_every == 0 {
            return bad("training steps, batch size, learning rate and log interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.polyak_decay) {
            return bad("polyak_decay must lie in [0, 1]".into());
        }
        if t.leads_min.is_empty() || t.leads_min.iter().any(|&l| l == 0 || l > 720 || l as i64 % w.step_min != 0) {
            return bad("training leads must be positive multiples of the step, at most 720".into());
        }
        if self.evaluation.fss_sizes.iter().any(|n| n % 2 == 0) {
            return bad("FSS neighbourhoods must be odd".into());
        }
        if self.evaluation.persistence_age_min < 0 {
            return bad("persistence age must be non-negative".into());
        }
        let mc = self.model_config()?;
        let main = &mc.heads[0];
        if mc.head_size(main) != (f.height, f.width) {
            return bad(format!(
                "padding of {}° does not match the model's context of {} coarse pixels",
                self.pipeline.pad_degrees,
                mc.context_px()
            ));
        }
        for p in [&self.paths.catalog, &self.paths.footprints, &self.paths.regions] {
            if !p.is_file() {
                return bad(format!("referenced file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    fn check_splits(&self) -> Result<()> {
        let s = &self.splits;
        let named = [("train", &s.train), ("threshold", &s.threshold), ("test", &s.test)];
        for (name, sp) in named {
            if sp.start >= sp.end || sp.every_steps <= 0 {
                return Err(CliError::validation(format!("{name} split is empty or has a non-positive stride")));
            }
            if sp.start < self.world.epoch {
                return Err(CliError::validation(format!("{name} split starts before the world epoch")));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                let (a, b) = (named[i], named[j]);
                if a.1.start < b.1.end && b.1.start < a.1.end {
                    return Err(CliError::validation(format!("{} and {} splits overlap", a.0, b.0)));
                }
            }
        }
        Ok(())
    }
}

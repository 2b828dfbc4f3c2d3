//! The five pipeline stages and their cached driver.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Duration, Utc};
use nowcast_core::calibrate::{apply_thresholds, candidate_thresholds, FitMetadata, ThresholdFitter, ThresholdTable};
use nowcast_core::geogrid::{load_grid, resample, save_grid, wrap_pad, GeoGrid, Geometry};
use nowcast_core::pipeline::{
    assemble_input, discretize_target, filter_target_patches, read_manifest, write_manifest, ClassGrid, ManifestRecord,
    NormAccumulator, NormStats, SourceInput, SourceSpec, TargetPatches,
};
use nowcast_core::verify::{
    evaluate, line_chart_svg, load_regions, write_report_csv, EvalConfig, EvalModel, ForecastSource, LatencySpec,
    TruthSource,
};
use nowcast_model::checkpoint::{load_checkpoint, save_checkpoint};
use nowcast_model::optim::{Example, Schedule, Trainer};
use nowcast_model::{HeadTarget, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{collect_outputs, stage_key, StageRecord};
use crate::config::{RunConfig, Split, Switch, MOSAICS, NWP, RADAR};
use crate::error::{CliError, Result};
use crate::world::{derive_seed, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Gen,
    Preprocess,
    Train,
    Calibrate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Gen, Stage::Preprocess, Stage::Train, Stage::Calibrate, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Stages selected by a `--stage` value.
    pub fn select(name: &str) -> Result<Vec<Stage>> {
        if name == "all" {
            return Ok(Stage::ALL.to_vec());
        }
        Stage::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .map(|s| vec![s])
            .ok_or_else(|| CliError::validation(format!("unknown stage {name:?}; expected gen|preprocess|train|calibrate|evaluate|all")))
    }

    fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Gen => None,
            Stage::Preprocess => Some(Stage::Gen),
            Stage::Train => Some(Stage::Preprocess),
            Stage::Calibrate => Some(Stage::Train),
            Stage::Evaluate => Some(Stage::Calibrate),
        }
    }
}

/// Where a run's artifacts live. Data and plans are shared by every
/// variant; checkpoints, thresholds and reports are per variant.
#[derive(Clone, Debug)]
pub struct Layout {
    pub out: PathBuf,
    pub variant: String,
}

impl Layout {
    pub fn new(out: &Path, switches: &[Switch]) -> Layout {
        let variant = if switches.is_empty() {
            "full".to_string()
        } else {
            format!("ablate-{}", switches.iter().map(|s| s.name()).collect::<Vec<_>>().join("+"))
        };
        Layout { out: out.to_path_buf(), variant }
    }

    pub fn plans(&self) -> PathBuf {
        self.out.join("plans")
    }
    pub fn raw(&self) -> PathBuf {
        self.out.join("data/raw")
    }
    pub fn prep(&self) -> PathBuf {
        self.out.join("data/prep")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.out.join("checkpoints").join(&self.variant)
    }
    pub fn thresholds(&self) -> PathBuf {
        self.out.join("thresholds").join(&self.variant)
    }
    pub fn reports(&self) -> PathBuf {
        self.out.join("reports").join(&self.variant)
    }
    pub fn world_plan(&self) -> PathBuf {
        self.plans().join("world_mosaic_plan.json")
    }

    fn stage_dir(&self, s: Stage) -> PathBuf {
        match s {
            Stage::Gen => self.raw(),
            Stage::Preprocess => self.prep(),
            Stage::Train => self.checkpoints(),
            Stage::Calibrate => self.thresholds(),
            Stage::Evaluate => self.reports(),
        }
    }

    pub fn record_path(&self, s: Stage) -> PathBuf {
        self.stage_dir(s).join(format!("{}.stage.json", s.name()))
    }

    pub fn frame_path(&self, product: &str, step: u64) -> PathBuf {
        self.raw().join(product).join(format!("{step:06}.grid"))
    }

    pub fn target_path(&self, head: &str, step: u64) -> PathBuf {
        self.prep().join("targets").join(head).join(format!("{step:06}.grid"))
    }

    pub fn manifest_path(&self, split: &str) -> PathBuf {
        self.prep().join(format!("manifest_{split}.ndjson"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.reports().join("metrics.csv")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub stage: Stage,
    pub cached: bool,
    pub seconds: f64,
}

/// A loaded run: config, switches and derived world.
pub struct Ctx {
    pub cfg: RunConfig,
    pub switches: Vec<Switch>,
    pub layout: Layout,
    pub world: World,
}

impl Ctx {
    pub fn new(cfg: RunConfig, switches: Vec<Switch>, out: &Path) -> Result<Ctx> {
        let world = World::new(&cfg)?;
        let layout = Layout::new(out, &switches);
        Ok(Ctx { cfg, switches, layout, world })
    }

    fn splits(&self) -> [(&'static str, &Split); 3] {
        let s = &self.cfg.splits;
        [("train", &s.train), ("threshold", &s.threshold), ("test", &s.test)]
    }

    fn leads(&self) -> &[u32] {
        &self.cfg.training.leads_min
    }

    fn zeroed(&self, source: &str) -> bool {
        self.switches.iter().any(|s| s.source() == Some(source))
    }

    fn drop_aux(&self) -> bool {
        self.switches.contains(&Switch::DropDenseAux)
    }

    /// Parameters that determine a stage's outputs, besides its upstream.
    fn params(&self, s: Stage) -> Result<serde_json::Value> {
        let c = &self.cfg;
        let file = |p: &Path| -> Result<String> { Ok(crate::cache::sha256_file(p)?) };
        Ok(match s {
            Stage::Gen => serde_json::json!({
                "seed": c.seed, "world": c.world, "splits": c.splits, "sources": c.pipeline.sources,
                "leads": c.training.leads_min, "persistence_age_min": c.evaluation.persistence_age_min,
                "catalog": file(&c.paths.catalog)?, "footprints": file(&c.paths.footprints)?,
            }),
            Stage::Preprocess => serde_json::json!({"seed": c.seed, "pipeline": c.pipeline}),
            Stage::Train => serde_json::json!({
                "seed": c.seed, "model": c.model, "training": c.training,
                "switches": self.switches.iter().map(|s| s.name()).collect::<Vec<_>>(),
            }),
            Stage::Calibrate => serde_json::json!({"calibration": c.calibration}),
            Stage::Evaluate => serde_json::json!({"evaluation": c.evaluation, "regions": file(&c.paths.regions)?}),
        })
    }

    /// Key a stage would have given its upstream record.
    fn key(&self, s: Stage, upstream: Option<&StageRecord>) -> Result<String> {
        let ups: Vec<&StageRecord> = upstream.into_iter().collect();
        stage_key(s.name(), &self.params(s)?, &ups)
    }

    /// The recorded outputs of `s` if they are current and untouched.
    fn current(&self, s: Stage) -> Result<Option<StageRecord>> {
        let up = match s.upstream() {
            Some(u) => match self.current(u)? {
                Some(r) => Some(r),
                None => return Ok(None),
            },
            None => None,
        };
        let Some(rec) = StageRecord::load(&self.layout.record_path(s)) else { return Ok(None) };
        if rec.key != self.key(s, up.as_ref())? || !rec.intact(&self.layout.out) {
            return Ok(None);
        }
        Ok(Some(rec))
    }

    /// Runs the selected stages in order, skipping any whose record is
    /// current.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<Outcome>> {
        let mut outcomes = Vec::new();
        for &s in stages {
            let start = Instant::now();
            let up = match s.upstream() {
                Some(u) => Some(self.current(u)?.ok_or_else(|| CliError::Missing {
                    stage: s.name().into(),
                    what: format!("current outputs of stage {}", u.name()),
                })?),
                None => None,
            };
            let key = self.key(s, up.as_ref())?;
            let record_path = self.layout.record_path(s);
            let cached = StageRecord::load(&record_path).is_some_and(|r| r.key == key && r.intact(&self.layout.out));
            if !cached {
                let dir = self.layout.stage_dir(s);
                if dir.exists() {
                    fs::remove_dir_all(&dir)?;
                }
                fs::create_dir_all(&dir)?;
                let mut extra = Vec::new();
                match s {
                    Stage::Gen => {
                        self.gen()?;
                        extra.push(self.layout.world_plan());
                    }
                    Stage::Preprocess => self.preprocess()?,
                    Stage::Train => self.train()?,
                    Stage::Calibrate => self.calibrate()?,
                    Stage::Evaluate => self.evaluate()?,
                }
                let outputs = collect_outputs(&self.layout.out, &[dir], &extra, &record_path)?;
                StageRecord { stage: s.name().into(), key, outputs }.save(&record_path)?;
            }
            outcomes.push(Outcome { stage: s, cached, seconds: start.elapsed().as_secs_f64() });
        }
        Ok(outcomes)
    }

    fn step(&self, t: DateTime<Utc>) -> Result<u64> {
        self.world.step_of(t)
    }

    fn valid_time(&self, init: DateTime<Utc>, lead: u32) -> DateTime<Utc> {
        init + Duration::minutes(lead as i64)
    }

    fn persistence_time(&self, init: DateTime<Utc>) -> DateTime<Utc> {
        init - Duration::minutes(self.cfg.evaluation.persistence_age_min)
    }

    // ---------------------------------------------------------------- gen

    fn gen(&self) -> Result<()> {
        let mut source_steps: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
        let mut truth_steps = BTreeSet::new();
        for (_, split) in self.splits() {
            for init in split.init_times(self.cfg.world.step_min) {
                for spec in &self.cfg.pipeline.sources {
                    for t in spec.obs_times(init) {
                        let s = self.step(t).map_err(|_| {
                            CliError::validation(format!("source {} needs {t}, before the world epoch", spec.name))
                        })?;
                        source_steps.entry(spec.name.as_str()).or_default().insert(s);
                        truth_steps.insert(s);
                    }
                }
                for &lead in self.leads() {
                    truth_steps.insert(self.step(self.valid_time(init, lead))?);
                }
                let p = self.step(self.persistence_time(init)).map_err(|_| {
                    CliError::validation("persistence frame falls before the world epoch".to_string())
                })?;
                truth_steps.insert(p);
            }
        }
        let steps: Vec<u64> = truth_steps.into_iter().collect();
        for name in ["truth", MOSAICS, RADAR, NWP] {
            fs::create_dir_all(self.layout.raw().join(name))?;
        }
        steps.par_iter().try_for_each(|&step| -> Result<()> {
            let truth = self.world.truth(step)?;
            save_grid(&truth, self.layout.frame_path("truth", step))?;
            let has = |n: &str| source_steps.get(n).is_some_and(|s| s.contains(&step));
            if has(MOSAICS) {
                save_grid(&self.world.mosaic_frame(&truth, step)?, self.layout.frame_path(MOSAICS, step))?;
            }
            if has(RADAR) {
                save_grid(&self.world.radar_frame(&truth), self.layout.frame_path(RADAR, step))?;
            }
            if has(NWP) {
                let t = self.world.time_of(step);
                save_grid(&self.world.nwp_input(&truth, t)?, self.layout.frame_path(NWP, step))?;
            }
            Ok(())
        })?;
        fs::create_dir_all(self.layout.plans())?;
        fs::write(self.layout.world_plan(), serde_json::to_string_pretty(&self.world.plan)? + "\n")?;
        Ok(())
    }

    // --------------------------------------------------------- preprocess

    fn preprocess(&self) -> Result<()> {
        let prep = self.layout.prep();
        let bins = self.cfg.binning();
        for spec in &self.cfg.pipeline.sources {
            let mut steps = BTreeSet::new();
            for init in self.cfg.splits.train.init_times(self.cfg.world.step_min) {
                for t in spec.obs_times(init) {
                    steps.insert(self.step(t)?);
                }
            }
            let mut acc = NormAccumulator::new(&spec.log_transform);
            for step in steps {
                acc.add(&load_grid(self.layout.frame_path(&spec.name, step))?)?;
            }
            let stats = acc.finish()?;
            fs::write(prep.join(format!("norm_{}.json", spec.name)), serde_json::to_string_pretty(&stats)? + "\n")?;
        }

        let mut target_steps = BTreeSet::new();
        for (_, split) in self.splits() {
            for init in split.init_times(self.cfg.world.step_min) {
                for &lead in self.leads() {
                    target_steps.insert(self.step(self.valid_time(init, lead))?);
                }
            }
        }
        for head in ["main", "aux"] {
            fs::create_dir_all(prep.join("targets").join(head))?;
        }
        let coarse = self.cfg.world.coarse_res;
        let empties: BTreeMap<u64, bool> = target_steps
            .par_iter()
            .map(|&step| -> Result<(u64, bool)> {
                let truth = load_grid(self.layout.frame_path("truth", step))?;
                let main = discretize_target(&self.world.swath_truth(&truth, step)?, &bins)?;
                save_grid(&main.to_grid(), self.layout.target_path("main", step))?;
                let aux = discretize_target(&resample(&truth, coarse)?, &bins)?;
                save_grid(&aux.to_grid(), self.layout.target_path("aux", step))?;
                Ok((step, main.is_empty()))
            })
            .collect::<Result<_>>()?;

        for (name, split) in self.splits() {
            let mut records = Vec::new();
            for init in split.init_times(self.cfg.world.step_min) {
                let mut sources = BTreeMap::new();
                for spec in &self.cfg.pipeline.sources {
                    let files = spec
                        .obs_times(init)
                        .into_iter()
                        .map(|t| Ok(self.rel(&self.layout.frame_path(&spec.name, self.step(t)?))))
                        .collect::<Result<Vec<_>>>()?;
                    sources.insert(spec.name.clone(), files);
                }
                let mut targets = BTreeMap::new();
                let mut empty = Vec::new();
                for &lead in self.leads() {
                    let step = self.step(self.valid_time(init, lead))?;
                    targets.insert(
                        format!("{lead:03}"),
                        vec![self.rel(&self.layout.target_path("main", step)), self.rel(&self.layout.target_path("aux", step))],
                    );
                    empty.push(empties[&step]);
                }
                records.push(Pending { record: ManifestRecord { init_time: init, sources, targets }, empty });
            }
            if name == "train" {
                let seed = derive_seed(self.cfg.seed, "patch-filter");
                records = filter_target_patches(records, self.cfg.pipeline.keep_empty_fraction, seed)?;
            }
            let recs: Vec<ManifestRecord> = records.into_iter().map(|p| p.record).collect();
            let mut w = BufWriter::new(fs::File::create(self.layout.manifest_path(name))?);
            write_manifest(&recs, &mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    fn rel(&self, p: &Path) -> String {
        crate::cache::relative(&self.layout.out, p)
    }

    fn manifest(&self, split: &str) -> Result<Vec<ManifestRecord>> {
        let f = fs::File::open(self.layout.manifest_path(split))?;
        Ok(read_manifest(BufReader::new(f))?)
    }

    // -------------------------------------------------------------- train

    fn train(&self) -> Result<()> {
        let records = self.manifest("train")?;
        let store = Store::load(self, &records)?;
        let mc = self.cfg.model_config()?;
        let net = Network::new(&mc)?;
        let mut params: Vec<f32> = net.init_params(derive_seed(self.cfg.seed, "init"));
        let t = &self.cfg.training;
        let aux_weight = if self.drop_aux() { 0.0 } else { t.aux_weight };
        let schedule = Schedule::new(t.learning_rate, t.steps);
        let mut trainer = Trainer::new(&net, &params, schedule, t.polyak_decay, vec![t.main_weight, aux_weight]);

        let mut pairs: Vec<(usize, u32)> = Vec::new();
        for (i, r) in records.iter().enumerate() {
            for key in r.targets.keys() {
                let lead: u32 = key.parse().map_err(|_| CliError::validation(format!("bad lead key {key}")))?;
                pairs.push((i, lead));
            }
        }
        if pairs.is_empty() {
            return Err(CliError::validation("training split has no samples"));
        }
        let mut inputs: BTreeMap<usize, Tensor<f32>> = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "batches"));
        let mut log = String::from("step,mean_loss,learning_rate\n");
        let mut window = 0.0;
        for step in 0..t.steps {
            let picks: Vec<(usize, u32)> = (0..t.batch_size).map(|_| pairs[rng.gen_range(0..pairs.len())]).collect();
            for &(i, _) in &picks {
                if !inputs.contains_key(&i) {
                    inputs.insert(i, store.input(self, records[i].init_time)?);
                }
            }
            let mut owned = Vec::with_capacity(picks.len());
            for &(i, lead) in &picks {
                let valid = self.valid_time(records[i].init_time, lead);
                owned.push((i, lead, store.target("main", valid)?, store.target("aux", valid)?));
            }
            let batch: Vec<Example> = owned
                .iter()
                .map(|(i, lead, main, aux)| Example {
                    input: &inputs[i],
                    lead_min: *lead,
                    targets: vec![
                        Some(HeadTarget { classes: &main.classes, mask: &main.mask }),
                        (!self.drop_aux()).then(|| HeadTarget { classes: &aux.classes, mask: &aux.mask }),
                    ],
                })
                .collect();
            let m = trainer.train_step(&net, &mut params, &batch)?;
            if m.rejected {
                return Err(CliError::Numeric(format!("non-finite loss {} at training step {step}", m.loss)));
            }
            window += m.loss;
            if (step + 1) % t.log_every == 0 || step + 1 == t.steps {
                let n = (step % t.log_every) + 1;
                log.push_str(&format!("{},{:.6},{:e}\n", step + 1, window / n as f64, m.lr));
                window = 0.0;
            }
        }
        let dir = self.layout.checkpoints();
        let phase = schedule.phase(t.steps.saturating_sub(1));
        save_checkpoint(&dir, "model", &net, &trainer.polyak.shadow, t.steps, t.steps, phase, true)?;
        fs::write(dir.join("train_log.csv"), log)?;
        Ok(())
    }

    fn load_model(&self) -> Result<(Network, Vec<f32>)> {
        let (_, net, params) = load_checkpoint(&self.layout.checkpoints(), "model")?;
        if net.config != self.cfg.model_config()? {
            return Err(CliError::validation("checkpoint was trained with a different model config"));
        }
        Ok((net, params))
    }

    /// Main-head probabilities for every lead of one initialization.
    fn forecast(&self, net: &Network, params: &[f32], input: &Tensor<f32>) -> Result<Vec<GeoGrid>> {
        let geom = self.cfg.head_geometries()[0];
        self.leads()
            .iter()
            .map(|&lead| {
                let out = net.forward(params, input, lead)?;
                let t = out.into_iter().next().expect("main head");
                Ok(GeoGrid::from_parts(geom, t.c, t.data, vec![true; geom.pixels()])?)
            })
            .collect()
    }

    // ---------------------------------------------------------- calibrate

    fn calibrate(&self) -> Result<()> {
        let records = self.manifest("threshold")?;
        let store = Store::load(self, &records)?;
        let (net, params) = self.load_model()?;
        let rates = self.cfg.calibration.rates.clone();
        let bins = self.cfg.binning();
        let fitters: Vec<ThresholdFitter> = records
            .par_iter()
            .map(|r| -> Result<ThresholdFitter> {
                let mut fitter = ThresholdFitter::new(rates.clone(), self.leads(), bins.clone());
                let probs = self.forecast(&net, &params, &store.input(self, r.init_time)?)?;
                for (&lead, p) in self.leads().iter().zip(&probs) {
                    let valid = self.valid_time(r.init_time, lead);
                    let step = self.step(valid)?;
                    let truth = self.world.swath_truth(&load_grid(self.layout.frame_path("truth", step))?, step)?;
                    fitter.add(lead, p, &truth, None)?;
                }
                Ok(fitter)
            })
            .collect::<Result<_>>()?;
        let mut total = ThresholdFitter::new(rates, self.leads(), bins);
        for f in &fitters {
            total.merge(f)?;
        }
        let sp = &self.cfg.splits.threshold;
        let table = total.finish(FitMetadata {
            split_start: Some(sp.start.date_naive()),
            split_end: Some(sp.end.date_naive()),
            candidates: candidate_thresholds(),
        });
        table.validate()?;
        fs::write(self.layout.thresholds().join("thresholds.json"), serde_json::to_string_pretty(&table)? + "\n")?;
        Ok(())
    }

    // ----------------------------------------------------------- evaluate

    fn evaluate(&self) -> Result<()> {
        let records = self.manifest("test")?;
        let store = Store::load(self, &records)?;
        let (net, params) = self.load_model()?;
        let table: ThresholdTable =
            serde_json::from_str(&fs::read_to_string(self.layout.thresholds().join("thresholds.json"))?)?;
        let rates = self.cfg.calibration.rates.clone();
        let bins = self.cfg.binning();

        let per_init: Vec<(Vec<((DateTime<Utc>, u32), GeoGrid)>, f64, usize)> = records
            .par_iter()
            .map(|r| -> Result<_> {
                let probs = self.forecast(&net, &params, &store.input(self, r.init_time)?)?;
                let mut fields = Vec::new();
                let (mut worst, mut negative) = (0f64, 0usize);
                for (&lead, p) in self.leads().iter().zip(&probs) {
                    for px in p.data().chunks_exact(p.channels()) {
                        let s: f64 = px.iter().map(|&v| v as f64).sum();
                        worst = worst.max((s - 1.0).abs());
                        negative += px.iter().filter(|&&v| !(v >= 0.0)).count();
                    }
                    fields.push(((r.init_time, lead), apply_thresholds(p, lead, &table, &rates, &bins)?));
                }
                Ok((fields, worst, negative))
            })
            .collect::<Result<_>>()?;
        let mut model_fields = BTreeMap::new();
        let (mut worst, mut negative) = (0f64, 0usize);
        for (fields, w, n) in per_init {
            model_fields.extend(fields);
            worst = worst.max(w);
            negative += n;
        }

        let mut truth = BTreeMap::new();
        let issue: Vec<DateTime<Utc>> = records.iter().map(|r| r.init_time).collect();
        for &init in &issue {
            let mut times = vec![self.persistence_time(init)];
            times.extend(self.leads().iter().map(|&l| self.valid_time(init, l)));
            for t in times {
                if let std::collections::btree_map::Entry::Vacant(e) = truth.entry(t) {
                    e.insert(load_grid(self.layout.frame_path("truth", self.step(t)?))?);
                }
            }
        }
        let truth_src = DenseTruth { frames: &truth };
        let model_src = Fields { fields: &model_fields };
        let persistence = Persistence { frames: &truth, age: self.cfg.evaluation.persistence_age_min };
        let nwp = NwpProxy { world: &self.world, frames: &truth };
        let models = [
            EvalModel { name: "model".into(), latency: self.cfg.evaluation.model_latency, source: &model_src },
            EvalModel {
                name: "persistence".into(),
                latency: LatencySpec::new(self.cfg.world.step_min as u32, 0),
                source: &persistence,
            },
            EvalModel { name: "nwp".into(), latency: self.cfg.world.nwp.latency, source: &nwp },
        ];
        let regions = load_regions(&self.cfg.paths.regions)?;
        let eval = EvalConfig {
            issue_times: issue,
            leads: self.leads().to_vec(),
            rates: rates.clone(),
            regions: regions.clone(),
            fss_sizes: self.cfg.evaluation.fss_sizes.clone(),
        };
        let rows = evaluate(&models, &truth_src, &eval)?;
        let reports = self.layout.reports();
        write_report_csv(&rows, BufWriter::new(fs::File::create(self.layout.metrics_path())?))?;
        if let Some(region) = regions.first() {
            for &rate in rates.rates() {
                let svg = line_chart_svg(&rows, &region.name, rate, "csi");
                fs::write(reports.join(format!("csi_{}_{rate}.svg", region.name)), svg)?;
            }
        }
        let check = InferenceCheck { max_simplex_error: worst, negative_probabilities: negative };
        fs::write(reports.join("inference_check.json"), serde_json::to_string_pretty(&check)? + "\n")?;
        Ok(())
    }
}

/// Probability-simplex summary of the evaluation inference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceCheck {
    pub max_simplex_error: f64,
    pub negative_probabilities: usize,
}

struct Pending {
    record: ManifestRecord,
    empty: Vec<bool>,
}

impl TargetPatches for Pending {
    fn empty_leads(&self) -> Vec<bool> {
        self.empty.clone()
    }

    fn retain_leads(&mut self, keep: &[bool]) {
        let keys: Vec<String> = self.record.targets.keys().cloned().collect();
        for (k, &kept) in keys.iter().zip(keep) {
            if !kept {
                self.record.targets.remove(k);
            }
        }
        let mut it = keep.iter();
        self.empty.retain(|_| *it.next().unwrap());
    }
}

/// Padded source frames, normalization statistics and targets needed by a
/// set of manifest records.
struct Store {
    frames: BTreeMap<String, BTreeMap<DateTime<Utc>, GeoGrid>>,
    geometry: BTreeMap<String, Geometry>,
    stats: BTreeMap<String, NormStats>,
    targets: BTreeMap<(&'static str, DateTime<Utc>), ClassGrid>,
}

impl Store {
    fn load(ctx: &Ctx, records: &[ManifestRecord]) -> Result<Store> {
        let cfg = &ctx.cfg;
        let fine_pad = cfg.pad_px(cfg.fine_geometry().res)?;
        let coarse_pad = cfg.pad_px(cfg.coarse_geometry().res)?;
        let mut store =
            Store { frames: BTreeMap::new(), geometry: BTreeMap::new(), stats: BTreeMap::new(), targets: BTreeMap::new() };
        for spec in &cfg.pipeline.sources {
            let path = ctx.layout.prep().join(format!("norm_{}.json", spec.name));
            store.stats.insert(spec.name.clone(), serde_json::from_str(&fs::read_to_string(path)?)?);
            let (base, pad) = if spec.fine { (cfg.fine_geometry(), fine_pad) } else { (cfg.coarse_geometry(), coarse_pad) };
            let padded = wrap_pad(&GeoGrid::zeros(base, 1), pad, pad)?;
            store.geometry.insert(spec.name.clone(), *padded.geometry());
            let mut times = BTreeSet::new();
            for r in records {
                times.extend(spec.obs_times(r.init_time));
            }
            let mut frames = BTreeMap::new();
            for t in times {
                let g = load_grid(ctx.layout.frame_path(&spec.name, ctx.step(t)?))?;
                frames.insert(t, wrap_pad(&g, pad, pad)?);
            }
            store.frames.insert(spec.name.clone(), frames);
        }
        for r in records {
            for key in r.targets.keys() {
                let lead: u32 = key.parse().map_err(|_| CliError::validation(format!("bad lead key {key}")))?;
                let valid = ctx.valid_time(r.init_time, lead);
                let step = ctx.step(valid)?;
                for head in ["main", "aux"] {
                    if !store.targets.contains_key(&(head, valid)) {
                        let g = load_grid(ctx.layout.target_path(head, step))?;
                        store.targets.insert((head, valid), ClassGrid::from_grid(&g)?);
                    }
                }
            }
        }
        Ok(store)
    }

    fn input(&self, ctx: &Ctx, init: DateTime<Utc>) -> Result<Tensor<f32>> {
        let specs: Vec<&SourceSpec> = ctx.cfg.pipeline.sources.iter().collect();
        let inputs: Vec<SourceInput> = specs
            .iter()
            .map(|spec| SourceInput {
                spec,
                frames: &self.frames[&spec.name],
                stats: &self.stats[&spec.name],
                geometry: self.geometry[&spec.name],
                zeroed: ctx.zeroed(&spec.name),
            })
            .collect();
        let assembled = assemble_input(&inputs, init)?;
        Ok(Tensor::from_grid(&assembled.tensor))
    }

    fn target(&self, head: &'static str, valid: DateTime<Utc>) -> Result<&ClassGrid> {
        self.targets
            .get(&(head, valid))
            .ok_or_else(|| CliError::Missing { stage: "train".into(), what: format!("{head} target at {valid}") })
    }
}

struct DenseTruth<'a> {
    frames: &'a BTreeMap<DateTime<Utc>, GeoGrid>,
}

impl TruthSource for DenseTruth<'_> {
    fn truth(&self, valid: DateTime<Utc>) -> nowcast_core::Result<Option<GeoGrid>> {
        Ok(self.frames.get(&valid).cloned())
    }

    fn dense(&self) -> bool {
        true
    }
}

struct Fields<'a> {
    fields: &'a BTreeMap<(DateTime<Utc>, u32), GeoGrid>,
}

impl ForecastSource for Fields<'_> {
    fn rate_field(&self, init: DateTime<Utc>, lead_min: u32) -> nowcast_core::Result<Option<GeoGrid>> {
        Ok(self.fields.get(&(init, lead_min)).cloned())
    }
}

/// The newest truth frame at initialization, repeated for every lead.
struct Persistence<'a> {
    frames: &'a BTreeMap<DateTime<Utc>, GeoGrid>,
    age: i64,
}

impl ForecastSource for Persistence<'_> {
    fn rate_field(&self, init: DateTime<Utc>, _lead_min: u32) -> nowcast_core::Result<Option<GeoGrid>> {
        Ok(self.frames.get(&(init - Duration::minutes(self.age))).cloned())
    }
}

struct NwpProxy<'a> {
    world: &'a World,
    frames: &'a BTreeMap<DateTime<Utc>, GeoGrid>,
}

impl ForecastSource for NwpProxy<'_> {
    fn rate_field(&self, init: DateTime<Utc>, lead_min: u32) -> nowcast_core::Result<Option<GeoGrid>> {
        let valid = init + Duration::minutes(lead_min as i64);
        let Some(truth) = self.frames.get(&valid) else { return Ok(None) };
        let cadence = self.world.cfg.world.nwp.latency.init_cadence_min.max(1) as i64;
        let epoch = self.world.cfg.world.epoch;
        let run = epoch + Duration::minutes((init - epoch).num_minutes().div_euclid(cadence) * cadence);
        self.world
            .nwp_forecast(truth, run, valid)
            .map(Some)
            .map_err(|e| nowcast_core::Error::Invalid(e.to_string()))
    }
}

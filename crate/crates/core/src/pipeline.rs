//! Input preprocessing: standardization, missing-data handling, timedelta
//! channels, channel assembly, target discretization and patch filtering.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{space_to_depth, GeoGrid, Geometry};

/// Timedelta channels are minutes divided by this (the 12 h horizon).
pub const TIMEDELTA_SCALE_MIN: f64 = 720.0;

/// Block size used to fold fine-resolution sources onto the model grid.
pub const FINE_BLOCK: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
    pub log_transform: bool,
}

impl ChannelStats {
    fn forward(&self, x: f64) -> f64 {
        let x = if self.log_transform { x.ln_1p() } else { x };
        (x - self.mean) / self.std
    }

    fn inverse(&self, z: f64) -> f64 {
        let x = z * self.std + self.mean;
        if self.log_transform {
            x.exp_m1()
        } else {
            x
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: Vec<ChannelStats>,
}

/// Count, mean and sum of squared deviations, merged with Chan's update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = self.count + other.count;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.count as f64 * other.count as f64) / n as f64;
        self.count = n;
    }
}

/// Mergeable per-channel statistics over valid pixels; shards can be
/// accumulated independently and combined with [`NormAccumulator::merge`].
#[derive(Clone, Debug)]
pub struct NormAccumulator {
    log_flags: Vec<bool>,
    moments: Vec<Moments>,
}

impl NormAccumulator {
    pub fn new(log_flags: &[bool]) -> Self {
        NormAccumulator { log_flags: log_flags.to_vec(), moments: vec![Moments::default(); log_flags.len()] }
    }

    pub fn add(&mut self, g: &GeoGrid) -> Result<()> {
        if g.channels() != self.log_flags.len() {
            return Err(Error::shape(format!(
                "grid has {} channels, statistics track {}",
                g.channels(),
                self.log_flags.len()
            )));
        }
        let c = g.channels();
        for (p, &valid) in g.mask().iter().enumerate() {
            if !valid {
                continue;
            }
            for ch in 0..c {
                let x = g.data()[p * c + ch] as f64;
                let x = if self.log_flags[ch] { x.ln_1p() } else { x };
                self.moments[ch].push(x);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &NormAccumulator) -> Result<()> {
        if other.log_flags != self.log_flags {
            return Err(Error::invalid("cannot merge accumulators with different channel layouts"));
        }
        for (a, b) in self.moments.iter_mut().zip(&other.moments) {
            a.merge(b);
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<NormStats> {
        let mut channels = Vec::with_capacity(self.moments.len());
        for (ch, (m, &log)) in self.moments.iter().zip(&self.log_flags).enumerate() {
            if m.count == 0 {
                return Err(Error::Channel { channel: ch, reason: "no valid pixels".into() });
            }
            let std = (m.m2 / m.count as f64).sqrt();
            if !(std > 1e-12 * m.mean.abs().max(1.0)) {
                return Err(Error::Channel { channel: ch, reason: "zero variance".into() });
            }
            channels.push(ChannelStats { mean: m.mean, std, log_transform: log });
        }
        Ok(NormStats { channels })
    }
}

/// Population mean and standard deviation of each channel over valid
/// pixels; flagged channels are measured on `ln(1 + x)`.
pub fn fit_norm_stats(grids: &[GeoGrid], log_flags: &[bool]) -> Result<NormStats> {
    let mut acc = NormAccumulator::new(log_flags);
    for g in grids {
        acc.add(g)?;
    }
    acc.finish()
}

fn check_stats(g: &GeoGrid, stats: &NormStats) -> Result<()> {
    if stats.channels.len() != g.channels() {
        return Err(Error::shape(format!(
            "statistics cover {} channels, grid has {}",
            stats.channels.len(),
            g.channels()
        )));
    }
    Ok(())
}

/// Standardizes every channel, then zeroes masked pixels.
pub fn normalize(g: &GeoGrid, stats: &NormStats) -> Result<GeoGrid> {
    check_stats(g, stats)?;
    let mut out = g.clone();
    let c = g.channels();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = stats.channels[i % c].forward(*v as f64) as f32;
    }
    out.zero_invalid();
    Ok(out)
}

/// Inverse of [`normalize`] on valid pixels; masked pixels stay 0.
pub fn denormalize(g: &GeoGrid, stats: &NormStats) -> Result<GeoGrid> {
    check_stats(g, stats)?;
    let mut out = g.clone();
    let c = g.channels();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = stats.channels[i % c].inverse(*v as f64) as f32;
    }
    out.zero_invalid();
    Ok(out)
}

/// Appends one constant channel holding the age of the observation at
/// initialization, in minutes over [`TIMEDELTA_SCALE_MIN`].
pub fn append_timedelta(g: &GeoGrid, obs_time: DateTime<Utc>, init_time: DateTime<Utc>) -> Result<GeoGrid> {
    if obs_time > init_time {
        return Err(Error::invalid(format!(
            "observation at {obs_time} is after initialization {init_time}"
        )));
    }
    let minutes = (init_time - obs_time).num_seconds() as f64 / 60.0;
    let dt = GeoGrid::filled(*g.geometry(), 1, (minutes / TIMEDELTA_SCALE_MIN) as f32);
    let mut out = GeoGrid::concat_channels(&[g, &dt])?;
    out.mask_mut().copy_from_slice(g.mask());
    Ok(out)
}

/// How one input dataset is sampled in time and placed on the model grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    pub channels: usize,
    pub timestamps: usize,
    pub spacing_min: i64,
    pub latency_min: i64,
    /// Fine sources are folded by space-to-depth onto the coarser grid.
    pub fine: bool,
    /// Per-channel `ln(1 + x)` normalization flags.
    pub log_transform: Vec<bool>,
}

impl SourceSpec {
    /// Observation times used for an initialization, oldest first.
    pub fn obs_times(&self, init_time: DateTime<Utc>) -> Vec<DateTime<Utc>> {
        let newest = init_time - Duration::minutes(self.latency_min);
        (0..self.timestamps)
            .rev()
            .map(|k| newest - Duration::minutes(self.spacing_min * k as i64))
            .collect()
    }

    pub fn assembled_channels(&self) -> usize {
        let per = self.channels + 1;
        let fold = if self.fine { FINE_BLOCK * FINE_BLOCK } else { 1 };
        self.timestamps * per * fold
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.timestamps == 0 {
            return Err(Error::invalid(format!("source {}: needs channels and timestamps", self.name)));
        }
        if self.latency_min < 0 || self.spacing_min < 0 {
            return Err(Error::invalid(format!("source {}: negative latency or spacing", self.name)));
        }
        if self.log_transform.len() != self.channels {
            return Err(Error::invalid(format!(
                "source {}: {} log flags for {} channels",
                self.name,
                self.log_transform.len(),
                self.channels
            )));
        }
        Ok(())
    }
}

/// Closed-form channel count of an assembled input.
pub fn assembled_channel_count(specs: &[SourceSpec]) -> usize {
    specs.iter().map(SourceSpec::assembled_channels).sum()
}

/// Time-indexed frames of one source.
pub trait FrameLookup {
    fn frame(&self, t: DateTime<Utc>) -> Option<&GeoGrid>;
}

impl FrameLookup for BTreeMap<DateTime<Utc>, GeoGrid> {
    fn frame(&self, t: DateTime<Utc>) -> Option<&GeoGrid> {
        self.get(&t)
    }
}

pub struct SourceInput<'a> {
    pub spec: &'a SourceSpec,
    pub frames: &'a dyn FrameLookup,
    pub stats: &'a NormStats,
    /// Native geometry of the source's frames.
    pub geometry: Geometry,
    /// Replace every value channel by zeros while keeping timedeltas.
    pub zeroed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub source: String,
    pub obs_time: DateTime<Utc>,
}

#[derive(Clone, Debug)]
pub struct AssembledInput {
    pub tensor: GeoGrid,
    pub outages: Vec<Outage>,
}

/// Builds the model input for one initialization time.
///
/// For each source, in order: pick its observation times, standardize each
/// frame, append the timedelta channel, fold fine sources with
/// space-to-depth, then stack everything along channels. A missing frame
/// becomes zeros (timedelta kept) and is reported as an outage.
pub fn assemble_input(sources: &[SourceInput<'_>], init_time: DateTime<Utc>) -> Result<AssembledInput> {
    let mut parts = Vec::new();
    let mut outages = Vec::new();
    for src in sources {
        src.spec.validate()?;
        for t in src.spec.obs_times(init_time) {
            let values = match src.frames.frame(t) {
                Some(_) if src.zeroed => zero_frame(src),
                Some(frame) => {
                    if !frame.geometry().matches(&src.geometry) || frame.channels() != src.spec.channels {
                        return Err(Error::Geometry(format!(
                            "source {} frame at {t} does not match its declared layout",
                            src.spec.name
                        )));
                    }
                    normalize(frame, src.stats)?
                }
                None => {
                    outages.push(Outage { source: src.spec.name.clone(), obs_time: t });
                    zero_frame(src)
                }
            };
            let with_dt = append_timedelta(&values, t, init_time)?;
            let part = if src.spec.fine { space_to_depth(&with_dt, FINE_BLOCK)? } else { with_dt };
            parts.push(part);
        }
    }
    let refs: Vec<&GeoGrid> = parts.iter().collect();
    let tensor = GeoGrid::concat_channels(&refs)?;
    Ok(AssembledInput { tensor, outages })
}

fn zero_frame(src: &SourceInput<'_>) -> GeoGrid {
    let mut g = GeoGrid::zeros(src.geometry, src.spec.channels);
    g.mask_mut().fill(false);
    g
}

/// Bin edges for categorical precipitation targets, mm/hr.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateBinning {
    pub edges: Vec<f64>,
    pub cap: f64,
}

impl Default for RateBinning {
    fn default() -> Self {
        RateBinning::geometric(30, 0.1, 2000.0)
    }
}

impl RateBinning {
    /// Edge 0 at zero, then `bins` edges spaced geometrically from `first`
    /// up to `cap`.
    pub fn geometric(bins: usize, first: f64, cap: f64) -> Self {
        let mut edges = vec![0.0];
        let ratio = cap / first;
        for k in 0..bins {
            edges.push(first * ratio.powf(k as f64 / (bins - 1) as f64));
        }
        edges[bins] = cap;
        RateBinning { edges, cap }
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.len() < 2 || self.edges[0] != 0.0 {
            return Err(Error::invalid("bin edges must start at 0"));
        }
        if self.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("bin edges must be strictly increasing"));
        }
        if *self.edges.last().unwrap() != self.cap {
            return Err(Error::invalid("last bin edge must equal the cap"));
        }
        Ok(())
    }

    /// Class of a non-negative rate; rates above the cap count as 0 and the
    /// cap itself falls in the last bin.
    pub fn class_of(&self, rate: f64) -> usize {
        let r = if rate > self.cap { 0.0 } else { rate };
        let k = self.edges.partition_point(|&e| e <= r);
        (k.max(1) - 1).min(self.bins() - 1)
    }
}

/// Per-pixel class indices with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGrid {
    pub geometry: Geometry,
    pub classes: Vec<u8>,
    pub mask: Vec<bool>,
}

impl ClassGrid {
    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    /// Stores class indices as values of a single-channel grid.
    pub fn to_grid(&self) -> GeoGrid {
        let data = self.classes.iter().map(|&c| c as f32).collect();
        GeoGrid::from_parts(self.geometry, 1, data, self.mask.clone()).expect("consistent class grid")
    }

    pub fn from_grid(g: &GeoGrid) -> Result<Self> {
        if g.channels() != 1 {
            return Err(Error::shape("class grid must have one channel"));
        }
        let classes = g
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v < 256.0 && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::invalid(format!("{v} is not a class index")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(ClassGrid { geometry: *g.geometry(), classes, mask: g.mask().to_vec() })
    }
}

/// Maps a single-channel rate grid (mm/hr) to class indices.
pub fn discretize_target(g: &GeoGrid, bins: &RateBinning) -> Result<ClassGrid> {
    if g.channels() != 1 {
        return Err(Error::shape(format!("target has {} channels, expected 1", g.channels())));
    }
    let mut classes = Vec::with_capacity(g.data().len());
    for (&v, &valid) in g.data().iter().zip(g.mask()) {
        if !valid {
            classes.push(0);
            continue;
        }
        if !(v >= 0.0) {
            return Err(Error::invalid(format!("corrupt precipitation rate {v}")));
        }
        classes.push(bins.class_of(v as f64) as u8);
    }
    Ok(ClassGrid { geometry: *g.geometry(), classes, mask: g.mask().to_vec() })
}

#[derive(Clone, Debug)]
pub struct LeadTarget {
    pub lead_min: u32,
    pub classes: ClassGrid,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub init_time: DateTime<Utc>,
    pub input: GeoGrid,
    pub targets: Vec<LeadTarget>,
    pub outages: Vec<Outage>,
}

/// Anything holding one target patch per lead time.
pub trait TargetPatches {
    /// `true` for each lead whose target has no valid pixel.
    fn empty_leads(&self) -> Vec<bool>;
    fn retain_leads(&mut self, keep: &[bool]);
}

impl TargetPatches for Sample {
    fn empty_leads(&self) -> Vec<bool> {
        self.targets.iter().map(|t| t.classes.is_empty()).collect()
    }

    fn retain_leads(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.targets.retain(|_| *it.next().unwrap());
    }
}

/// Drops fully masked lead targets, keeping each with probability
/// `keep_empty_fraction`. Samples left without any lead are dropped.
pub fn filter_target_patches<S: TargetPatches>(samples: Vec<S>, keep_empty_fraction: f64, seed: u64) -> Result<Vec<S>> {
    if !(0.0..=1.0).contains(&keep_empty_fraction) {
        return Err(Error::invalid(format!("keep fraction {keep_empty_fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.len());
    for mut s in samples {
        let keep: Vec<bool> = s
            .empty_leads()
            .into_iter()
            .map(|empty| !empty || rng.gen::<f64>() < keep_empty_fraction)
            .collect();
        if keep.iter().any(|&k| k) {
            s.retain_leads(&keep);
            out.push(s);
        }
    }
    Ok(out)
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub init_time: DateTime<Utc>,
    pub sources: BTreeMap<String, Vec<String>>,
    pub targets: BTreeMap<String, Vec<String>>,
}

pub fn write_manifest<W: Write>(records: &[ManifestRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

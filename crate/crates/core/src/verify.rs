//! Forecast verification: contingency counts under masks, CSI, frequency
//! bias, fractions skill score, latency-aware alignment and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::calibrate::RateSet;
use crate::error::{Error, Result};
use crate::geogrid::{resample, GeoGrid, Geometry};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyTable {
    pub fn new(hits: u64, misses: u64, false_alarms: u64, correct_negatives: u64) -> Self {
        ContingencyTable { hits, misses, false_alarms, correct_negatives }
    }

    pub fn merge(&mut self, o: &ContingencyTable) {
        self.hits += o.hits;
        self.misses += o.misses;
        self.false_alarms += o.false_alarms;
        self.correct_negatives += o.correct_negatives;
    }

    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }
}

/// A metric value; undefined scores carry NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub defined: bool,
}

impl Score {
    pub fn ratio(num: f64, den: f64) -> Score {
        if den == 0.0 {
            Score::undefined()
        } else {
            Score { value: num / den, defined: true }
        }
    }

    pub fn undefined() -> Score {
        Score { value: f64::NAN, defined: false }
    }
}

pub fn csi(t: &ContingencyTable) -> Score {
    Score::ratio(t.hits as f64, (t.hits + t.misses + t.false_alarms) as f64)
}

pub fn frequency_bias(t: &ContingencyTable) -> Score {
    Score::ratio((t.hits + t.false_alarms) as f64, (t.hits + t.misses) as f64)
}

fn check_same(forecast: &GeoGrid, truth: &GeoGrid) -> Result<()> {
    if !forecast.geometry().matches(truth.geometry()) {
        return Err(Error::Geometry(format!(
            "forecast {:?} vs truth {:?}",
            forecast.geometry(),
            truth.geometry()
        )));
    }
    if forecast.channels() != 1 || truth.channels() != 1 {
        return Err(Error::shape("rate grids must have one channel"));
    }
    Ok(())
}

fn region_ok(region: Option<&[bool]>, p: usize) -> bool {
    region.map_or(true, |r| r[p])
}

/// Adds every pixel valid in both grids (and inside `region`) to `table`.
pub fn accumulate(
    forecast: &GeoGrid,
    truth: &GeoGrid,
    rate: f64,
    region: Option<&[bool]>,
    table: &mut ContingencyTable,
) -> Result<()> {
    check_same(forecast, truth)?;
    for p in 0..truth.geometry().pixels() {
        if !(truth.mask()[p] && forecast.mask()[p] && region_ok(region, p)) {
            continue;
        }
        let event = truth.data()[p] as f64 >= rate;
        let predicted = forecast.data()[p] as f64 >= rate;
        match (predicted, event) {
            (true, true) => table.hits += 1,
            (false, true) => table.misses += 1,
            (true, false) => table.false_alarms += 1,
            (false, false) => table.correct_negatives += 1,
        }
    }
    Ok(())
}

/// Running sums behind an aggregate fractions skill score.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FssAccum {
    pub sq_diff: f64,
    pub reference: f64,
    pub pixels: u64,
}

impl FssAccum {
    pub fn merge(&mut self, o: &FssAccum) {
        self.sq_diff += o.sq_diff;
        self.reference += o.reference;
        self.pixels += o.pixels;
    }

    pub fn score(&self) -> Score {
        if self.reference == 0.0 {
            Score::undefined()
        } else {
            Score { value: 1.0 - self.sq_diff / self.reference, defined: true }
        }
    }
}

/// Summed-area table with a zero border row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> u32) -> Vec<u64> {
    let mut s = vec![0u64; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0u64;
        for c in 0..w {
            row += f(r * w + c) as u64;
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[u64], w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> u64 {
    let w1 = w + 1;
    s[r1 * w1 + c1] + s[r0 * w1 + c0] - s[r0 * w1 + c1] - s[r1 * w1 + c0]
}

/// Neighbourhood fraction sums for one pair of fields. Windows are
/// truncated to pixels inside the domain and the joint mask.
pub fn fss_accum(forecast: &GeoGrid, truth: &GeoGrid, rate: f64, n: usize, region: Option<&[bool]>) -> Result<FssAccum> {
    if n % 2 == 0 {
        return Err(Error::invalid(format!("neighbourhood {n} must be odd")));
    }
    check_same(forecast, truth)?;
    let (h, w) = (truth.height(), truth.width());
    let valid = |p: usize| truth.mask()[p] && forecast.mask()[p] && region_ok(region, p);
    let sv = integral(h, w, |p| valid(p) as u32);
    let sf = integral(h, w, |p| (valid(p) && forecast.data()[p] as f64 >= rate) as u32);
    let so = integral(h, w, |p| (valid(p) && truth.data()[p] as f64 >= rate) as u32);
    let half = n / 2;
    let mut acc = FssAccum::default();
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(half), (r + half + 1).min(h));
        for c in 0..w {
            if !valid(r * w + c) {
                continue;
            }
            let (c0, c1) = (c.saturating_sub(half), (c + half + 1).min(w));
            let count = box_sum(&sv, w, r0, r1, c0, c1) as f64;
            let f = box_sum(&sf, w, r0, r1, c0, c1) as f64 / count;
            let o = box_sum(&so, w, r0, r1, c0, c1) as f64 / count;
            acc.sq_diff += (f - o) * (f - o);
            acc.reference += f * f + o * o;
            acc.pixels += 1;
        }
    }
    Ok(acc)
}

pub fn fss(forecast: &GeoGrid, truth: &GeoGrid, rate: f64, n: usize) -> Result<Score> {
    Ok(fss_accum(forecast, truth, rate, n, None)?.score())
}

/// When runs of a model start and how long their outputs take to appear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySpec {
    pub init_cadence_min: u32,
    pub availability_latency_min: u32,
}

impl LatencySpec {
    pub fn new(init_cadence_min: u32, availability_latency_min: u32) -> Self {
        LatencySpec { init_cadence_min, availability_latency_min }
    }

    /// Age of the newest run available at a cycle boundary.
    pub fn run_age(&self) -> u32 {
        let (c, l) = (self.init_cadence_min, self.availability_latency_min);
        if c == 0 {
            l
        } else {
            l.div_ceil(c) * c
        }
    }
}

/// Lead time inside the newest available run that verifies `wanted_lead`
/// minutes from now.
pub fn effective_lead(spec: LatencySpec, wanted_lead: u32) -> u32 {
    wanted_lead + spec.run_age()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLonBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub boxes: Vec<LatLonBox>,
}

impl Region {
    pub fn global() -> Region {
        Region {
            name: "global".into(),
            boxes: vec![LatLonBox { lat_min: -90.0, lat_max: 90.0, lon_min: -180.0, lon_max: 360.0 }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            let lat_ok = -90.0 <= b.lat_min && b.lat_min <= b.lat_max && b.lat_max <= 90.0;
            let lon_ok = -180.0 <= b.lon_min && b.lon_min <= b.lon_max && b.lon_max <= 360.0;
            if !(lat_ok && lon_ok) {
                return Err(Error::invalid(format!("region {}: box {b:?} is outside the globe", self.name)));
            }
        }
        Ok(())
    }

    /// `true` for pixels whose centre falls in any box.
    pub fn mask(&self, g: &Geometry) -> Vec<bool> {
        let mut m = Vec::with_capacity(g.pixels());
        for r in 0..g.height {
            for c in 0..g.width {
                let (lat, lon) = g.pixel_center(r, c);
                m.push(self.boxes.iter().any(|b| {
                    (b.lat_min..=b.lat_max).contains(&lat) && (b.lon_min..=b.lon_max).contains(&lon)
                }));
            }
        }
        m
    }
}

pub fn load_regions(path: impl AsRef<Path>) -> Result<Vec<Region>> {
    let regions: Vec<Region> = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
    for r in &regions {
        r.validate()?;
    }
    Ok(regions)
}

/// Deterministic rate fields (mm/hr) of one model.
pub trait ForecastSource {
    /// Field of the run started at `init` for `lead_min`, if it exists.
    fn rate_field(&self, init: DateTime<Utc>, lead_min: u32) -> Result<Option<GeoGrid>>;
}

pub trait TruthSource {
    fn truth(&self, valid: DateTime<Utc>) -> Result<Option<GeoGrid>>;
    /// Dense truth supports neighbourhood scores.
    fn dense(&self) -> bool;
}

/// Serves an hourly model at quarter-hour leads by holding each hourly
/// rate over the hour that ends at it.
pub struct HourlyUniform<S>(pub S);

impl<S: ForecastSource> ForecastSource for HourlyUniform<S> {
    fn rate_field(&self, init: DateTime<Utc>, lead_min: u32) -> Result<Option<GeoGrid>> {
        self.0.rate_field(init, lead_min.div_ceil(60) * 60)
    }
}

pub struct EvalModel<'a> {
    pub name: String,
    pub latency: LatencySpec,
    pub source: &'a dyn ForecastSource,
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    /// Times at which a nowcast is wanted.
    pub issue_times: Vec<DateTime<Utc>>,
    pub leads: Vec<u32>,
    pub rates: RateSet,
    pub regions: Vec<Region>,
    /// Odd neighbourhood sizes for dense-truth runs.
    pub fss_sizes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Defined,
    Undefined,
    Absent,
}

impl Flag {
    fn of(s: Score) -> Flag {
        if s.defined {
            Flag::Defined
        } else {
            Flag::Undefined
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub region: String,
    pub rate_mm_hr: f64,
    pub lead_min: u32,
    pub metric: String,
    pub value: f64,
    pub defined_flag: Flag,
    pub n_px: Option<usize>,
}

#[derive(Default)]
struct Cell {
    tables: Vec<ContingencyTable>,
    fss: Vec<Vec<FssAccum>>,
    absent: bool,
}

/// Aggregates each model over all issue times and emits CSI, frequency
/// bias and (for dense truth) FSS per region, rate and lead. A lead with
/// any missing forecast is reported as absent for that model.
pub fn evaluate(models: &[EvalModel<'_>], truth: &dyn TruthSource, cfg: &EvalConfig) -> Result<Vec<ReportRow>> {
    for n in &cfg.fss_sizes {
        if n % 2 == 0 {
            return Err(Error::invalid(format!("neighbourhood {n} must be odd")));
        }
    }
    let rates = cfg.rates.rates();
    let nreg = cfg.regions.len();
    let mut rows = Vec::new();
    let mut masks: BTreeMap<String, Vec<Vec<bool>>> = BTreeMap::new();
    for m in models {
        for &lead in &cfg.leads {
            let mut cell = Cell {
                tables: vec![ContingencyTable::default(); nreg * rates.len()],
                fss: vec![vec![FssAccum::default(); cfg.fss_sizes.len()]; nreg * rates.len()],
                absent: false,
            };
            let age = m.latency.run_age() as i64;
            let eff = effective_lead(m.latency, lead);
            for &issue in &cfg.issue_times {
                let valid = issue + Duration::minutes(lead as i64);
                let Some(t) = truth.truth(valid)? else { continue };
                let Some(f) = m.source.rate_field(issue - Duration::minutes(age), eff)? else {
                    cell.absent = true;
                    break;
                };
                let f = if f.geometry().matches(t.geometry()) { f } else { resample(&f, t.res())? };
                let key = format!("{:?}", t.geometry());
                let region_masks = masks
                    .entry(key)
                    .or_insert_with(|| cfg.regions.iter().map(|r| r.mask(t.geometry())).collect());
                for (ri, rm) in region_masks.iter().enumerate() {
                    for (ki, &rate) in rates.iter().enumerate() {
                        let idx = ri * rates.len() + ki;
                        accumulate(&f, &t, rate, Some(rm), &mut cell.tables[idx])?;
                        if truth.dense() {
                            for (si, &n) in cfg.fss_sizes.iter().enumerate() {
                                let a = fss_accum(&f, &t, rate, n, Some(rm))?;
                                cell.fss[idx][si].merge(&a);
                            }
                        }
                    }
                }
            }
            for (ri, region) in cfg.regions.iter().enumerate() {
                for (ki, &rate) in rates.iter().enumerate() {
                    let idx = ri * rates.len() + ki;
                    let mut push = |metric: &str, s: Score, n_px: Option<usize>| {
                        let (value, flag) =
                            if cell.absent { (f64::NAN, Flag::Absent) } else { (s.value, Flag::of(s)) };
                        rows.push(ReportRow {
                            model: m.name.clone(),
                            region: region.name.clone(),
                            rate_mm_hr: rate,
                            lead_min: lead,
                            metric: metric.into(),
                            value,
                            defined_flag: flag,
                            n_px,
                        });
                    };
                    push("csi", csi(&cell.tables[idx]), None);
                    push("frequency_bias", frequency_bias(&cell.tables[idx]), None);
                    if truth.dense() {
                        for (si, &n) in cfg.fss_sizes.iter().enumerate() {
                            push("fss", cell.fss[idx][si].score(), Some(n));
                        }
                    }
                }
            }
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

fn metric_rank(m: &str) -> u8 {
    match m {
        "csi" => 0,
        "frequency_bias" => 1,
        _ => 2,
    }
}

pub fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        (&a.model, &a.region)
            .cmp(&(&b.model, &b.region))
            .then(a.rate_mm_hr.total_cmp(&b.rate_mm_hr))
            .then(a.lead_min.cmp(&b.lead_min))
            .then(metric_rank(&a.metric).cmp(&metric_rank(&b.metric)))
            .then(a.n_px.cmp(&b.n_px))
    });
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "region", "rate_mm_hr", "lead_min", "metric", "value", "defined_flag", "n_px"])?;
    for r in rows {
        let flag = match r.defined_flag {
            Flag::Defined => "defined",
            Flag::Undefined => "undefined",
            Flag::Absent => "absent",
        };
        out.write_record([
            r.model.clone(),
            r.region.clone(),
            r.rate_mm_hr.to_string(),
            r.lead_min.to_string(),
            r.metric.clone(),
            r.value.to_string(),
            flag.to_string(),
            r.n_px.map(|n| n.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_report_csv<R: std::io::Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Format(format!("short report row {rec:?}")));
        let num = |i: usize| -> Result<f64> {
            field(i)?.parse().map_err(|_| Error::Format(format!("bad number in column {i}")))
        };
        let defined_flag = match field(6)? {
            "defined" => Flag::Defined,
            "undefined" => Flag::Undefined,
            "absent" => Flag::Absent,
            other => return Err(Error::Format(format!("unknown flag {other}"))),
        };
        let n_px = match field(7)? {
            "" => None,
            s => Some(s.parse().map_err(|_| Error::Format(format!("bad n_px {s}")))?),
        };
        rows.push(ReportRow {
            model: field(0)?.to_string(),
            region: field(1)?.to_string(),
            rate_mm_hr: num(2)?,
            lead_min: num(3)? as u32,
            metric: field(4)?.to_string(),
            value: num(5)?,
            defined_flag,
            n_px,
        });
    }
    Ok(rows)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One SVG line chart of `metric` against lead for every model, restricted
/// to a region and rate.
pub fn line_chart_svg(rows: &[ReportRow], region: &str, rate: f64, metric: &str) -> String {
    let mut series: BTreeMap<&str, Vec<(u32, f64)>> = BTreeMap::new();
    for r in rows {
        if r.region == region && r.rate_mm_hr == rate && r.metric == metric && r.n_px.is_none() {
            let s = series.entry(&r.model).or_default();
            if r.defined_flag == Flag::Defined {
                s.push((r.lead_min, r.value));
            }
        }
    }
    let pts = series.values().flatten();
    let max_lead = pts.clone().map(|p| p.0).max().unwrap_or(60).max(1) as f64;
    let max_val = pts.map(|p| p.1).fold(1.0f64, f64::max);
    let (w, h, m) = (480.0, 300.0, 40.0);
    let x = |l: u32| m + (w - 2.0 * m) * l as f64 / max_lead;
    let y = |v: f64| h - m - (h - 2.0 * m) * v / max_val;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(svg, r#"<text x="{m}" y="20">{metric} at {rate} mm/hr, {region}</text>"#);
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(svg, r#"<text x="{}" y="{}">lead (min), max {max_lead}</text>"#, w / 2.0 - 40.0, h - 8.0);
    let _ = writeln!(svg, r#"<text x="4" y="{}">{max_val:.2}</text>"#, m + 4.0);
    for (i, (model, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(l, v)| format!("{:.1},{:.1}", x(l), y(v))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" fill="{color}">{model}</text>"#, w - m - 90.0, m + 14.0 * i as f64);
    }
    svg.push_str("</svg>\n");
    svg
}

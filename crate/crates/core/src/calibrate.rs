//! Probability-threshold calibration of binned rate forecasts.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::GeoGrid;
use crate::pipeline::RateBinning;

/// Threshold used when a rate never occurs during fitting.
pub const FALLBACK_THRESHOLD: f64 = 0.5;

/// Number of uniform candidate thresholds, `1/100 ..= 99/100`.
pub const CANDIDATES: usize = 99;

pub fn candidate(j: usize) -> f64 {
    j as f64 / 100.0
}

pub fn candidate_thresholds() -> Vec<f64> {
    (1..=CANDIDATES).map(candidate).collect()
}

/// Ordered exceedance rates in mm/hr.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RateSet(Vec<f64>);

impl Default for RateSet {
    fn default() -> Self {
        RateSet(vec![0.2, 1.0, 2.4, 5.0, 7.0, 10.0, 15.0, 25.0])
    }
}

impl RateSet {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::invalid("rate set is empty"));
        }
        if !(rates[0] > 0.0) || rates.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(format!("rates {rates:?} must be positive and strictly increasing")));
        }
        Ok(RateSet(rates))
    }

    pub fn rates(&self) -> &[f64] {
        &self.0
    }
}

/// `P(rain >= rate)` from one pixel's bin probabilities. The bin holding
/// `rate` contributes the fraction of its width above `rate`, measured in
/// log space (linearly for the bin starting at zero).
pub fn exceedance_at(probs: &[f32], rate: f64, bins: &RateBinning) -> Result<f64> {
    let n = bins.bins();
    if probs.len() != n {
        return Err(Error::shape(format!("{} probabilities for {n} bins", probs.len())));
    }
    if !(rate >= 0.0) || rate > bins.cap {
        return Err(Error::invalid(format!("rate {rate} outside [0, {}]", bins.cap)));
    }
    let e = &bins.edges;
    let k = (e.partition_point(|&x| x <= rate) - 1).min(n - 1);
    let frac = if k == 0 {
        (e[1] - rate) / e[1]
    } else {
        (e[k + 1] / rate).ln() / (e[k + 1] / e[k]).ln()
    };
    let mut tail = 0.0;
    for &p in probs[k + 1..].iter().rev() {
        tail += p as f64;
    }
    Ok((tail + probs[k] as f64 * frac).clamp(0.0, 1.0))
}

/// Exceedance probability of every pixel of a bin-probability grid.
pub fn exceedance_probability(probs: &GeoGrid, rate: f64, bins: &RateBinning) -> Result<Vec<f64>> {
    let c = probs.channels();
    probs.data().chunks_exact(c).map(|px| exceedance_at(px, rate, bins)).collect()
}

/// Number of candidates `j/100` with `j/100 <= p`.
fn passed_candidates(p: f64) -> usize {
    let mut k = ((p * 100.0).floor().max(0.0) as usize).min(CANDIDATES);
    while k > 0 && candidate(k) > p {
        k -= 1;
    }
    while k < CANDIDATES && candidate(k + 1) <= p {
        k += 1;
    }
    k
}

/// Per-(rate, lead) histograms of how many candidates each pixel passes,
/// split by observed outcome.
#[derive(Clone, Debug, PartialEq)]
struct PassCounts {
    events: [u64; CANDIDATES + 1],
    non_events: [u64; CANDIDATES + 1],
}

impl Default for PassCounts {
    fn default() -> Self {
        PassCounts { events: [0; CANDIDATES + 1], non_events: [0; CANDIDATES + 1] }
    }
}

impl PassCounts {
    fn merge(&mut self, o: &PassCounts) {
        for k in 0..=CANDIDATES {
            self.events[k] += o.events[k];
            self.non_events[k] += o.non_events[k];
        }
    }

    fn select(&self) -> (f64, f64, u64) {
        let total: u64 = self.events.iter().sum();
        if total == 0 {
            return (FALLBACK_THRESHOLD, 0.0, 0);
        }
        let mut hits = 0u64;
        let mut false_alarms = 0u64;
        // cumulative from the top: candidate j is passed by pixels with k >= j
        let mut csi = vec![(0u64, 0u64); CANDIDATES + 1];
        for j in (1..=CANDIDATES).rev() {
            hits += self.events[j];
            false_alarms += self.non_events[j];
            csi[j] = (hits, total + false_alarms);
        }
        let mut best = 1;
        for j in 2..=CANDIDATES {
            let (h, d) = csi[j];
            let (bh, bd) = csi[best];
            if (h as u128) * (bd as u128) > (bh as u128) * (d as u128) {
                best = j;
            }
        }
        let (h, d) = csi[best];
        (candidate(best), h as f64 / d as f64, total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub rate_mm_hr: f64,
    pub lead_min: u32,
    pub threshold: f64,
    pub csi_at_fit: f64,
    pub events_seen: u64,
    pub low_confidence: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub split_start: Option<NaiveDate>,
    pub split_end: Option<NaiveDate>,
    pub candidates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub metadata: FitMetadata,
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdTable {
    pub fn get(&self, rate: f64, lead_min: u32) -> Result<&ThresholdEntry> {
        self.entries
            .iter()
            .find(|e| e.lead_min == lead_min && (e.rate_mm_hr - rate).abs() <= 1e-9 * rate.max(1.0))
            .ok_or_else(|| Error::Missing(format!("no threshold for {rate} mm/hr at lead {lead_min} min")))
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.threshold) {
                return Err(Error::invalid(format!("threshold {} outside [0, 1]", e.threshold)));
            }
        }
        Ok(())
    }
}

/// Streaming accumulator for threshold fitting; shards merge exactly.
#[derive(Clone, Debug)]
pub struct ThresholdFitter {
    rates: RateSet,
    bins: RateBinning,
    leads: Vec<u32>,
    counts: BTreeMap<(usize, u32), PassCounts>,
}

impl ThresholdFitter {
    pub fn new(rates: RateSet, leads: &[u32], bins: RateBinning) -> Self {
        let mut counts = BTreeMap::new();
        for r in 0..rates.rates().len() {
            for &l in leads {
                counts.insert((r, l), PassCounts::default());
            }
        }
        ThresholdFitter { rates, bins, leads: leads.to_vec(), counts }
    }

    /// Adds one forecast (bin probabilities) and its truth (mm/hr) at the
    /// same geometry. Pixels count when valid in both and inside `region`.
    pub fn add(&mut self, lead_min: u32, probs: &GeoGrid, truth: &GeoGrid, region: Option<&[bool]>) -> Result<()> {
        if !self.leads.contains(&lead_min) {
            return Err(Error::Missing(format!("lead {lead_min} min is not being fitted")));
        }
        if !probs.geometry().matches(truth.geometry()) || truth.channels() != 1 {
            return Err(Error::Geometry("forecast and truth grids differ".into()));
        }
        if region.is_some_and(|r| r.len() != truth.geometry().pixels()) {
            return Err(Error::shape("region mask size differs from the grid"));
        }
        let c = probs.channels();
        for (ri, &rate) in self.rates.rates().iter().enumerate() {
            let counts = self.counts.get_mut(&(ri, lead_min)).expect("initialized");
            for p in 0..truth.geometry().pixels() {
                if !(probs.mask()[p] && truth.mask()[p] && region.map_or(true, |r| r[p])) {
                    continue;
                }
                let pe = exceedance_at(&probs.data()[p * c..(p + 1) * c], rate, &self.bins)?;
                let k = passed_candidates(pe);
                if truth.data()[p] as f64 >= rate {
                    counts.events[k] += 1;
                } else {
                    counts.non_events[k] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ThresholdFitter) -> Result<()> {
        if self.rates != other.rates || self.leads != other.leads {
            return Err(Error::invalid("cannot merge fitters over different rates or leads"));
        }
        for (k, v) in &other.counts {
            self.counts.get_mut(k).expect("same keys").merge(v);
        }
        Ok(())
    }

    pub fn finish(&self, metadata: FitMetadata) -> ThresholdTable {
        let mut entries = Vec::new();
        for (ri, &rate) in self.rates.rates().iter().enumerate() {
            for &lead in &self.leads {
                let (threshold, csi, events) = self.counts[&(ri, lead)].select();
                entries.push(ThresholdEntry {
                    rate_mm_hr: rate,
                    lead_min: lead,
                    threshold,
                    csi_at_fit: csi,
                    events_seen: events,
                    low_confidence: events == 0,
                });
            }
        }
        let metadata = FitMetadata { candidates: candidate_thresholds(), ..metadata };
        ThresholdTable { metadata, entries }
    }
}

/// Deterministic rate field: per pixel, the largest rate whose exceedance
/// probability reaches its fitted threshold, else 0.
pub fn apply_thresholds(
    probs: &GeoGrid,
    lead_min: u32,
    table: &ThresholdTable,
    rates: &RateSet,
    bins: &RateBinning,
) -> Result<GeoGrid> {
    let thresholds: Vec<f64> =
        rates.rates().iter().map(|&r| table.get(r, lead_min).map(|e| e.threshold)).collect::<Result<_>>()?;
    let c = probs.channels();
    let mut data = Vec::with_capacity(probs.geometry().pixels());
    for px in probs.data().chunks_exact(c) {
        let mut shown = 0.0;
        for (&rate, &t) in rates.rates().iter().zip(&thresholds).rev() {
            if exceedance_at(px, rate, bins)? >= t {
                shown = rate;
                break;
            }
        }
        data.push(shown as f32);
    }
    let mut out = GeoGrid::from_parts(*probs.geometry(), 1, data, probs.mask().to_vec())?;
    out.zero_invalid();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::Geometry;

    fn geom(n: usize) -> Geometry {
        Geometry::new(0.0, 0.0, 0.05, 1, n).unwrap()
    }

    fn one_hot(n: usize, classes: &[usize]) -> GeoGrid {
        let mut data = vec![0f32; n * classes.len()];
        for (p, &k) in classes.iter().enumerate() {
            data[p * n + k] = 1.0;
        }
        GeoGrid::from_parts(geom(classes.len()), n, data, vec![true; classes.len()]).unwrap()
    }

    #[test]
    fn rate_zero_is_certain() {
        let b = RateBinning::default();
        let mut p = vec![0f32; 30];
        p[0] = 0.7;
        p[3] = 0.3;
        assert_eq!(exceedance_at(&p, 0.0, &b).unwrap(), 1.0);
    }

    #[test]
    fn top_bin_mass() {
        let b = RateBinning::default();
        let mut p = vec![0f32; 30];
        p[29] = 1.0;
        for r in [0.0, 0.2, 5.0, b.edges[29]] {
            assert_eq!(exceedance_at(&p, r, &b).unwrap(), 1.0, "rate {r}");
        }
    }

    #[test]
    fn uniform_half_at_bin_15() {
        let b = RateBinning::default();
        let p = vec![1.0f32 / 30.0; 30];
        assert!((exceedance_at(&p, b.edges[15], &b).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn straddling_bin_prorated_in_log_space() {
        let b = RateBinning::default();
        let mut p = vec![0f32; 30];
        p[5] = 1.0;
        let mid = (b.edges[5] * b.edges[6]).sqrt();
        assert!((exceedance_at(&p, mid, &b).unwrap() - 0.5).abs() < 1e-12);
        let mut p0 = vec![0f32; 30];
        p0[0] = 1.0;
        assert!((exceedance_at(&p0, 0.025, &b).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rate_above_cap_rejected() {
        let b = RateBinning::default();
        assert!(exceedance_at(&[0.0; 30], 2000.5, &b).is_err());
        assert!(exceedance_at(&[0.0; 29], 1.0, &b).is_err());
    }

    #[test]
    fn candidate_counting() {
        assert_eq!(passed_candidates(0.0), 0);
        assert_eq!(passed_candidates(0.005), 0);
        assert_eq!(passed_candidates(0.01), 1);
        assert_eq!(passed_candidates(0.07), 7);
        assert_eq!(passed_candidates(0.29), 29);
        assert_eq!(passed_candidates(0.995), 99);
        assert_eq!(passed_candidates(1.0), 99);
        for j in 1..=99 {
            assert_eq!(passed_candidates(candidate(j)), j);
        }
    }

    #[test]
    fn perfect_forecast_picks_smallest_threshold() {
        let b = RateBinning::default();
        let truth_rates = [0.0f32, 3.0, 0.0, 12.0];
        let classes: Vec<usize> = truth_rates.iter().map(|&r| b.class_of(r as f64)).collect();
        let probs = one_hot(30, &classes);
        let truth = GeoGrid::from_parts(geom(4), 1, truth_rates.to_vec(), vec![true; 4]).unwrap();
        let rates = RateSet::new(vec![1.0]).unwrap();
        let mut f = ThresholdFitter::new(rates, &[15], b);
        f.add(15, &probs, &truth, None).unwrap();
        let table = f.finish(FitMetadata::default());
        let e = table.get(1.0, 15).unwrap();
        assert_eq!(e.threshold, 0.01);
        assert_eq!(e.csi_at_fit, 1.0);
        assert_eq!(e.events_seen, 2);
        assert!(!e.low_confidence);
    }

    #[test]
    fn never_observed_rate_is_flagged() {
        let b = RateBinning::default();
        let probs = one_hot(30, &[0, 0]);
        let truth = GeoGrid::zeros(geom(2), 1);
        let mut f = ThresholdFitter::new(RateSet::new(vec![5.0]).unwrap(), &[30], b);
        f.add(30, &probs, &truth, None).unwrap();
        let e = f.finish(FitMetadata::default()).entries[0].clone();
        assert_eq!(e.threshold, FALLBACK_THRESHOLD);
        assert!(e.low_confidence);
        assert_eq!(e.events_seen, 0);
    }

    #[test]
    fn region_mask_limits_pixels() {
        let b = RateBinning::default();
        let probs = one_hot(30, &[0, 10]);
        let truth = GeoGrid::from_parts(geom(2), 1, vec![0.0, 5.0], vec![true; 2]).unwrap();
        let mut f = ThresholdFitter::new(RateSet::new(vec![1.0]).unwrap(), &[15], b);
        f.add(15, &probs, &truth, Some(&[true, false])).unwrap();
        assert!(f.finish(FitMetadata::default()).entries[0].low_confidence);
    }

    fn table(entries: &[(f64, f64)]) -> ThresholdTable {
        ThresholdTable {
            metadata: FitMetadata::default(),
            entries: entries
                .iter()
                .map(|&(r, t)| ThresholdEntry {
                    rate_mm_hr: r,
                    lead_min: 60,
                    threshold: t,
                    csi_at_fit: 0.0,
                    events_seen: 1,
                    low_confidence: false,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_probabilities_show_no_rain() {
        let b = RateBinning::default();
        let rates = RateSet::default();
        let t = table(&rates.rates().iter().map(|&r| (r, 0.3)).collect::<Vec<_>>());
        let probs = GeoGrid::zeros(geom(3), 30);
        let out = apply_thresholds(&probs, 60, &t, &rates, &b).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn displayed_rate_is_largest_passing() {
        let b = RateBinning::default();
        let rates = RateSet::new(vec![0.2, 2.4, 7.0]).unwrap();
        let t = table(&[(0.2, 0.5), (2.4, 0.3), (7.0, 0.3)]);
        // 0.6 of the mass sits in the bin starting at 1.0, 0.4 at ~3.8 mm/hr
        let mut data = vec![0f32; 30];
        let k_low = b.class_of(1.0);
        let k_mid = b.class_of(3.8);
        data[k_low] = 0.6;
        data[k_mid] = 0.4;
        let probs = GeoGrid::from_parts(geom(1), 30, data, vec![true]).unwrap();
        let pe = |r| exceedance_at(probs.pixel(0, 0), r, &b).unwrap();
        assert!(pe(0.2) >= 0.5 && pe(2.4) >= 0.3 && pe(7.0) < 0.3);
        let out = apply_thresholds(&probs, 60, &t, &rates, &b).unwrap();
        assert_eq!(out.data(), &[2.4]);
    }

    #[test]
    fn missing_entry_rejected() {
        let b = RateBinning::default();
        let rates = RateSet::new(vec![0.2, 1.0]).unwrap();
        let t = table(&[(0.2, 0.5)]);
        let probs = GeoGrid::zeros(geom(1), 30);
        assert!(matches!(apply_thresholds(&probs, 60, &t, &rates, &b), Err(Error::Missing(_))));
    }

    #[test]
    fn rate_set_validation() {
        assert!(RateSet::new(vec![]).is_err());
        assert!(RateSet::new(vec![1.0, 1.0]).is_err());
        assert!(RateSet::new(vec![0.0, 1.0]).is_err());
        assert_eq!(RateSet::default().rates().len(), 8);
    }

    #[test]
    fn threshold_json_fields() {
        let t = table(&[(0.2, 0.5)]);
        let v: serde_json::Value = serde_json::to_value(&t.entries[0]).unwrap();
        for k in ["rate_mm_hr", "lead_min", "threshold", "csi_at_fit", "events_seen", "low_confidence"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}

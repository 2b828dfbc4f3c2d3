//! Geostationary mosaics: matching bands across satellites and blending
//! overlapping disks into one raster.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{GeoGrid, Geometry};

/// One spectral band of one satellite, wavelengths in micrometres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub satellite: String,
    pub band_id: String,
    pub center_um: f64,
    pub lo_um: f64,
    pub hi_um: f64,
    /// Nominal wavelength label in nanometres used when naming a mosaic
    /// seeded by this band; defaults to the rounded centre.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_nm: Option<u32>,
}

impl Band {
    pub fn new(satellite: &str, band_id: &str, center_um: f64, lo_um: f64, hi_um: f64) -> Self {
        Band {
            satellite: satellite.to_string(),
            band_id: band_id.to_string(),
            center_um,
            lo_um,
            hi_um,
            nominal_nm: None,
        }
    }

    pub fn width(&self) -> f64 {
        self.hi_um - self.lo_um
    }

    /// Key identifying the band's raster: `satellite/band_id`.
    pub fn key(&self) -> String {
        format!("{}/{}", self.satellite, self.band_id)
    }

    pub fn overlaps(&self, lo: f64, hi: f64) -> bool {
        self.lo_um <= hi && lo <= self.hi_um
    }

    fn validate(&self) -> Result<()> {
        let ok = [self.lo_um, self.center_um, self.hi_um].iter().all(|v| v.is_finite())
            && self.lo_um < self.center_um
            && self.center_um < self.hi_um;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "band {} has invalid range {}..{} around {}",
                self.key(),
                self.lo_um,
                self.hi_um,
                self.center_um
            )))
        }
    }
}

/// An output mosaic: the seed band's range plus every band assigned to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosaicSpec {
    pub name: String,
    pub center_um: f64,
    pub lo_um: f64,
    pub hi_um: f64,
    pub members: Vec<Band>,
}

impl MosaicSpec {
    /// Satellites contributing to this mosaic, deduplicated, in member order.
    pub fn satellites(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for m in &self.members {
            if !seen.contains(&m.satellite.as_str()) {
                seen.push(m.satellite.as_str());
            }
        }
        seen
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosaicPlan {
    pub mosaics: Vec<MosaicSpec>,
    pub unassigned: Vec<Band>,
}

fn sort_key_cmp(a: &Band, b: &Band) -> Ordering {
    a.width()
        .total_cmp(&b.width())
        .then(a.center_um.total_cmp(&b.center_um))
        .then_with(|| a.satellite.cmp(&b.satellite))
        .then_with(|| a.band_id.cmp(&b.band_id))
}

/// Derives mosaics from a band catalog.
///
/// Bands are visited narrowest first; a band becomes a seed when its range
/// touches no earlier seed. Each catalog band then joins the mosaic whose
/// centre is nearest its own, provided the ranges overlap; otherwise it is
/// reported unassigned. Mosaics are returned in ascending centre order.
pub fn plan_mosaics(catalog: &[Band]) -> Result<MosaicPlan> {
    if catalog.is_empty() {
        return Err(Error::invalid("band catalog is empty"));
    }
    for b in catalog {
        b.validate()?;
    }
    let mut sorted: Vec<&Band> = catalog.iter().collect();
    sorted.sort_by(|a, b| sort_key_cmp(a, b));

    let mut seeds: Vec<&Band> = Vec::new();
    for band in sorted {
        if !seeds.iter().any(|s| band.overlaps(s.lo_um, s.hi_um)) {
            seeds.push(band);
        }
    }
    seeds.sort_by(|a, b| a.center_um.total_cmp(&b.center_um).then(a.lo_um.total_cmp(&b.lo_um)));

    let mut mosaics: Vec<MosaicSpec> = seeds
        .iter()
        .map(|s| MosaicSpec {
            name: format!(
                "mosaic_{}_nm",
                s.nominal_nm.unwrap_or_else(|| (s.center_um * 1000.0).round() as u32)
            ),
            center_um: s.center_um,
            lo_um: s.lo_um,
            hi_um: s.hi_um,
            members: Vec::new(),
        })
        .collect();

    let mut unassigned = Vec::new();
    for band in catalog {
        match nearest_overlapping(band, &mosaics) {
            Some(i) => mosaics[i].members.push(band.clone()),
            None => unassigned.push(band.clone()),
        }
    }
    Ok(MosaicPlan { mosaics, unassigned })
}

/// Index of the mosaic with the nearest centre, if the band overlaps it.
/// Among equally near mosaics the first overlapping one wins.
fn nearest_overlapping(band: &Band, mosaics: &[MosaicSpec]) -> Option<usize> {
    let dist = |m: &MosaicSpec| (band.center_um - m.center_um).abs();
    let best = mosaics.iter().map(dist).min_by(|a, b| a.total_cmp(b))?;
    mosaics
        .iter()
        .position(|m| dist(m) == best && band.overlaps(m.lo_um, m.hi_um))
}

/// Viewing geometry of one geostationary satellite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatelliteFootprint {
    pub satellite: String,
    pub nadir_lat: f64,
    pub nadir_lon: f64,
    #[serde(rename = "max_view_angle_deg")]
    pub max_view_angle: f64,
    #[serde(rename = "sigma_deg")]
    pub sigma: f64,
}

impl SatelliteFootprint {
    pub const DEFAULT_SIGMA_DEG: f64 = 30.0;
    pub const DEFAULT_MAX_VIEW_DEG: f64 = 70.0;

    pub fn new(satellite: &str, nadir_lat: f64, nadir_lon: f64) -> Self {
        SatelliteFootprint {
            satellite: satellite.to_string(),
            nadir_lat,
            nadir_lon,
            max_view_angle: Self::DEFAULT_MAX_VIEW_DEG,
            sigma: Self::DEFAULT_SIGMA_DEG,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_view_angle > 0.0 && self.max_view_angle <= 90.0) {
            return Err(Error::invalid(format!(
                "{}: max view angle {} outside (0, 90]",
                self.satellite, self.max_view_angle
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid(format!("{}: sigma must be positive", self.satellite)));
        }
        Ok(())
    }

    /// Gaussian weight of a pixel, zero outside the usable disk.
    pub fn weight(&self, lat: f64, lon: f64) -> f64 {
        let d = great_circle_deg(lat, lon, self.nadir_lat, self.nadir_lon);
        if d > self.max_view_angle {
            0.0
        } else {
            (-d * d / (2.0 * self.sigma * self.sigma)).exp()
        }
    }
}

/// Great-circle separation in degrees of arc.
pub fn great_circle_deg(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    (2.0 * h.sqrt().min(1.0).asin()).to_degrees()
}

#[derive(Clone, Copy, Debug)]
pub struct BlendSample<'a> {
    pub footprint: &'a SatelliteFootprint,
    pub value: f64,
    pub valid: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blended {
    pub value: f64,
    pub valid: bool,
}

/// Gaussian centre-weighted average of the samples covering one pixel.
///
/// The weighted sum is accumulated in a canonical order so the result does
/// not depend on sample order, and is clamped to the range of contributing
/// values.
pub fn blend(lat: f64, lon: f64, samples: &[BlendSample<'_>]) -> Blended {
    let mut terms: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.valid && s.value.is_finite())
        .map(|s| (s.footprint.weight(lat, lon), s.value))
        .filter(|&(w, _)| w > 0.0)
        .collect();
    match terms.len() {
        0 => return Blended { value: 0.0, valid: false },
        1 => return Blended { value: terms[0].1, valid: true },
        _ => {}
    }
    terms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (mut sw, mut swv) = (0.0, 0.0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(w, v) in &terms {
        sw += w;
        swv += w * v;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Blended { value: (swv / sw).clamp(lo, hi), valid: true }
}

/// Blends every member raster of `spec` onto `out`.
///
/// Rasters are keyed by [`Band::key`] and must already share the output
/// geometry and channel count. Members without a raster are skipped.
pub fn blend_mosaic(
    spec: &MosaicSpec,
    rasters: &BTreeMap<String, GeoGrid>,
    footprints: &BTreeMap<String, SatelliteFootprint>,
    out: &Geometry,
) -> Result<GeoGrid> {
    let mut inputs: Vec<(&GeoGrid, &SatelliteFootprint)> = Vec::new();
    for band in &spec.members {
        let Some(raster) = rasters.get(&band.key()) else { continue };
        if !raster.geometry().matches(out) {
            return Err(Error::Geometry(format!(
                "raster {} is {}×{} at {}°, output is {}×{} at {}°",
                band.key(),
                raster.height(),
                raster.width(),
                raster.res(),
                out.height,
                out.width,
                out.res
            )));
        }
        let fp = footprints
            .get(&band.satellite)
            .ok_or_else(|| Error::Missing(format!("footprint for {}", band.satellite)))?;
        fp.validate()?;
        inputs.push((raster, fp));
    }
    let channels = inputs.first().map_or(1, |(r, _)| r.channels());
    if inputs.iter().any(|(r, _)| r.channels() != channels) {
        return Err(Error::shape(format!("{}: member rasters disagree on channel count", spec.name)));
    }

    let mut grid = GeoGrid::zeros(*out, channels);
    let mut samples = Vec::with_capacity(inputs.len());
    for row in 0..out.height {
        for col in 0..out.width {
            let (lat, lon) = out.pixel_center(row, col);
            let mut any = false;
            for ch in 0..channels {
                samples.clear();
                samples.extend(inputs.iter().map(|(r, fp)| BlendSample {
                    footprint: fp,
                    value: r.get(row, col, ch) as f64,
                    valid: r.is_valid(row, col),
                }));
                let b = blend(lat, lon, &samples);
                any |= b.valid;
                grid.set(row, col, ch, if b.valid { b.value as f32 } else { 0.0 });
            }
            grid.mask_mut()[row * out.width + col] = any;
        }
    }
    Ok(grid)
}

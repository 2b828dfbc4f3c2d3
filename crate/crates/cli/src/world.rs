//! The bundled synthetic world: truth rain, blended pseudo-satellite
//! mosaics, a partial-coverage radar proxy, a drifting NWP proxy and swath
//! targets, each a pure function of the run config, its seed and the step.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use nowcast_core::geogrid::{resample, GeoGrid};
use nowcast_core::mosaic::{blend_mosaic, plan_mosaics, Band, MosaicPlan, MosaicSpec, SatelliteFootprint};
use nowcast_core::synthdata::{default_transfers, observe_channels_with, sample_swath, scene_frame, SceneParams, Transfer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, MOSAICS};
use crate::error::{CliError, Result};

/// Seed for one named purpose, derived from the run seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn load_catalog(path: &Path) -> Result<Vec<Band>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("catalog {}: {e}", path.display())))
}

pub fn load_footprints(path: &Path) -> Result<BTreeMap<String, SatelliteFootprint>> {
    let text = fs::read_to_string(path)?;
    let list: Vec<SatelliteFootprint> =
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("footprints {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for fp in list {
        fp.validate()?;
        out.insert(fp.satellite.clone(), fp);
    }
    Ok(out)
}

pub struct World {
    pub cfg: RunConfig,
    pub scene: SceneParams,
    pub plan: MosaicPlan,
    pub mosaics: Vec<MosaicSpec>,
    pub footprints: BTreeMap<String, SatelliteFootprint>,
    pub transfers: Vec<Transfer>,
}

impl World {
    pub fn new(cfg: &RunConfig) -> Result<World> {
        let catalog = load_catalog(&cfg.paths.catalog)?;
        let footprints = load_footprints(&cfg.paths.footprints)?;
        let plan = plan_mosaics(&catalog)?;
        let k = cfg.source(MOSAICS)?.channels;
        if plan.mosaics.len() < k {
            return Err(CliError::validation(format!(
                "catalog yields {} mosaics, the mosaics source needs {k}",
                plan.mosaics.len()
            )));
        }
        let mosaics = plan.mosaics[..k].to_vec();
        for m in &mosaics {
            for b in &m.members {
                if !footprints.contains_key(&b.satellite) {
                    return Err(CliError::validation(format!("no footprint for satellite {}", b.satellite)));
                }
            }
        }
        let mut scene = cfg.world.scene.clone();
        scene.seed = derive_seed(cfg.seed, "scene");
        Ok(World { cfg: cfg.clone(), scene, plan, mosaics, footprints, transfers: default_transfers(k) })
    }

    pub fn step_of(&self, t: DateTime<Utc>) -> Result<u64> {
        let mins = (t - self.cfg.world.epoch).num_minutes();
        let step = self.cfg.world.step_min;
        if mins < 0 || mins % step != 0 || (t - self.cfg.world.epoch).num_seconds() % 60 != 0 {
            return Err(CliError::validation(format!("{t} is not a world step")));
        }
        Ok((mins / step) as u64)
    }

    pub fn time_of(&self, step: u64) -> DateTime<Utc> {
        self.cfg.world.epoch + Duration::minutes(self.cfg.world.step_min * step as i64)
    }

    pub fn truth(&self, step: u64) -> Result<GeoGrid> {
        Ok(scene_frame(&self.scene, step)?)
    }

    /// One blended channel per selected mosaic.
    pub fn mosaic_frame(&self, truth: &GeoGrid, step: u64) -> Result<GeoGrid> {
        let geom = *truth.geometry();
        let mut channels = Vec::with_capacity(self.mosaics.len());
        for (k, m) in self.mosaics.iter().enumerate() {
            let mut rasters = BTreeMap::new();
            for b in &m.members {
                let label = format!("sensor/{}/{}/{step}", b.satellite, b.band_id);
                let seed = derive_seed(self.cfg.seed, &label);
                let r = observe_channels_with(truth, &self.transfers[k..=k], self.cfg.world.sensor_noise, seed)?;
                rasters.insert(b.key(), r);
            }
            channels.push(blend_mosaic(m, &rasters, &self.footprints, &geom)?);
        }
        let refs: Vec<&GeoGrid> = channels.iter().collect();
        Ok(GeoGrid::concat_channels(&refs)?)
    }

    /// Truth where the radar network reaches, masked elsewhere.
    pub fn radar_frame(&self, truth: &GeoGrid) -> GeoGrid {
        let mut out = truth.clone();
        let g = *truth.geometry();
        for r in 0..g.height {
            for c in 0..g.width {
                let (_, lon) = g.pixel_center(r, c);
                if lon > self.cfg.world.radar_lon_max {
                    out.mask_mut()[r * g.width + c] = false;
                }
            }
        }
        out.zero_invalid();
        out
    }

    /// Start of the run whose forecast for `t` is the newest one available
    /// at `t`.
    pub fn nwp_run_for(&self, t: DateTime<Utc>) -> DateTime<Utc> {
        let lat = self.cfg.world.nwp.latency;
        let cadence = lat.init_cadence_min.max(1) as i64;
        let avail = (t - self.cfg.world.epoch).num_minutes() - lat.availability_latency_min as i64;
        self.cfg.world.epoch + Duration::minutes(avail.div_euclid(cadence) * cadence)
    }

    /// NWP-proxy forecast from the run started at `run_init`, valid when
    /// `truth_at_valid` was observed: blurred coarse truth displaced by an
    /// error that grows with forecast age in a per-run direction.
    pub fn nwp_forecast(&self, truth_at_valid: &GeoGrid, run_init: DateTime<Utc>, valid: DateTime<Utc>) -> Result<GeoGrid> {
        let p = &self.cfg.world.nwp;
        let mut g = resample(truth_at_valid, self.cfg.world.coarse_res)?;
        for _ in 0..p.blur_passes {
            g = box_blur(&g);
        }
        let run_index = (run_init - self.cfg.world.epoch).num_minutes();
        let angle = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("nwp/{run_index}")))
            .gen_range(0.0..std::f64::consts::TAU);
        let hours = (valid - run_init).num_minutes().max(0) as f64 / 60.0;
        let dist = p.drift_px_per_hour * hours;
        let (dx, dy) = ((dist * angle.cos()).round() as i64, (dist * angle.sin()).round() as i64);
        Ok(shift(&g, dy, dx))
    }

    pub fn nwp_input(&self, truth: &GeoGrid, t: DateTime<Utc>) -> Result<GeoGrid> {
        self.nwp_forecast(truth, self.nwp_run_for(t), t)
    }

    /// Truth restricted to the swath overpassing at `step`.
    pub fn swath_truth(&self, truth: &GeoGrid, step: u64) -> Result<GeoGrid> {
        let mut sw = self.cfg.world.swath.clone();
        sw.seed = derive_seed(self.cfg.seed, "swath");
        Ok(sample_swath(truth, &sw, step)?)
    }
}

/// 3×3 mean filter on a periodic grid.
fn box_blur(g: &GeoGrid) -> GeoGrid {
    let (h, w, c) = (g.height() as i64, g.width() as i64, g.channels());
    let mut out = g.clone();
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut s = 0f64;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        s += g.get((r + dr).rem_euclid(h) as usize, (col + dc).rem_euclid(w) as usize, ch) as f64;
                    }
                }
                out.set(r as usize, col as usize, ch, (s / 9.0) as f32);
            }
        }
    }
    out
}

/// Periodic translation: output pixel `(r, c)` takes input `(r - dy, c - dx)`.
fn shift(g: &GeoGrid, dy: i64, dx: i64) -> GeoGrid {
    let (h, w, c) = (g.height() as i64, g.width() as i64, g.channels());
    let mut out = g.clone();
    for r in 0..h {
        for col in 0..w {
            let (sr, sc) = ((r - dy).rem_euclid(h) as usize, (col - dx).rem_euclid(w) as usize);
            for ch in 0..c {
                out.set(r as usize, col as usize, ch, g.get(sr, sc, ch));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nowcast_core::geogrid::Geometry;

    #[test]
    fn shift_wraps() {
        let g = GeoGrid::from_parts(Geometry::new(0.0, 0.0, 1.0, 2, 3).unwrap(), 1, vec![1., 2., 3., 4., 5., 6.], vec![true; 6]).unwrap();
        assert_eq!(shift(&g, 0, 1).data(), &[3., 1., 2., 6., 4., 5.]);
        assert_eq!(shift(&g, 1, 0).data(), &[4., 5., 6., 1., 2., 3.]);
        assert_eq!(shift(&g, -2, 3).data(), g.data());
    }

    #[test]
    fn blur_preserves_mass() {
        let mut d = vec![0f32; 16];
        d[5] = 9.0;
        let g = GeoGrid::from_parts(Geometry::new(0.0, 0.0, 1.0, 4, 4).unwrap(), 1, d, vec![true; 16]).unwrap();
        let b = box_blur(&g);
        let s: f32 = b.data().iter().sum();
        assert!((s - 9.0).abs() < 1e-5);
        assert_eq!(b.get(0, 0, 0), 1.0);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(5, "x"), derive_seed(5, "x"));
    }
}

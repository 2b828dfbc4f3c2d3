//! Probabilistic forecasts for every (lead, head) of one initialization.

use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use nowcast_core::geogrid::{load_grid, save_grid, GeoGrid, Geometry};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastCube {
    pub init_time: DateTime<Utc>,
    pub latency_min: u32,
    pub heads: Vec<String>,
    pub leads: Vec<u32>,
    /// `slices[lead_index][head_index]`, one channel per bin.
    pub slices: Vec<Vec<GeoGrid>>,
}

#[derive(Serialize, Deserialize)]
struct CubeFile {
    lead_min: u32,
    head: String,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct CubeIndex {
    init_time: DateTime<Utc>,
    latency_min: u32,
    heads: Vec<String>,
    leads: Vec<u32>,
    files: Vec<CubeFile>,
}

impl ForecastCube {
    pub fn get(&self, lead_min: u32, head: &str) -> Option<&GeoGrid> {
        let l = self.leads.iter().position(|&x| x == lead_min)?;
        let h = self.heads.iter().position(|x| x == head)?;
        Some(&self.slices[l][h])
    }

    /// Largest deviation of a per-pixel bin sum from 1, and whether any
    /// probability falls outside `[0, 1]`.
    pub fn simplex_error(&self) -> (f64, bool) {
        let mut worst = 0f64;
        let mut out_of_range = false;
        for g in self.slices.iter().flatten() {
            for px in g.data().chunks_exact(g.channels()) {
                let s: f64 = px.iter().map(|&v| v as f64).sum();
                worst = worst.max((s - 1.0).abs());
                out_of_range |= px.iter().any(|&v| !(0.0..=1.0).contains(&v));
            }
        }
        (worst, out_of_range)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (li, &lead) in self.leads.iter().enumerate() {
            for (hi, head) in self.heads.iter().enumerate() {
                let file = format!("lead{lead:03}_{head}.grid");
                save_grid(&self.slices[li][hi], dir.join(&file))?;
                files.push(CubeFile { lead_min: lead, head: head.clone(), file });
            }
        }
        let index = CubeIndex {
            init_time: self.init_time,
            latency_min: self.latency_min,
            heads: self.heads.clone(),
            leads: self.leads.clone(),
            files,
        };
        fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<ForecastCube> {
        let index: CubeIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
        let mut slices = vec![Vec::with_capacity(index.heads.len()); index.leads.len()];
        for f in &index.files {
            let li = index.leads.iter().position(|&l| l == f.lead_min);
            let hi = index.heads.iter().position(|h| *h == f.head);
            let (Some(li), Some(hi)) = (li, hi) else {
                return Err(ModelError::Checkpoint(format!("cube index lists unknown slice {}", f.file)));
            };
            if slices[li].len() != hi {
                return Err(ModelError::Checkpoint("cube index is out of order".into()));
            }
            slices[li].push(load_grid(dir.join(&f.file))?);
        }
        Ok(ForecastCube {
            init_time: index.init_time,
            latency_min: index.latency_min,
            heads: index.heads,
            leads: index.leads,
            slices,
        })
    }
}

/// Runs the network for each lead (in parallel) and georeferences each
/// head's output with `geometries[head]`.
pub fn infer(
    net: &Network,
    params: &[f32],
    input: &Tensor<f32>,
    leads: &[u32],
    geometries: &[Geometry],
    init_time: DateTime<Utc>,
    latency_min: u32,
) -> Result<ForecastCube> {
    if geometries.len() != net.config.heads.len() {
        return Err(ModelError::shape("cube", "one geometry per head required"));
    }
    let outputs: Vec<Vec<Tensor<f32>>> =
        leads.par_iter().map(|&l| net.forward(params, input, l)).collect::<Result<_>>()?;
    let mut slices = Vec::with_capacity(leads.len());
    for heads in outputs {
        let mut row = Vec::with_capacity(heads.len());
        for (t, g) in heads.into_iter().zip(geometries) {
            if (t.h, t.w) != (g.height, g.width) {
                return Err(ModelError::shape("cube", format!("head output {}×{} vs geometry {:?}", t.h, t.w, g)));
            }
            let n = t.pixels();
            row.push(GeoGrid::from_parts(*g, t.c, t.data, vec![true; n])?);
        }
        slices.push(row);
    }
    Ok(ForecastCube {
        init_time,
        latency_min,
        heads: net.config.heads.iter().map(|h| h.name.clone()).collect(),
        leads: leads.to_vec(),
        slices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use chrono::TimeZone;

    #[test]
    fn infer_write_read() {
        let cfg = ModelConfig::desk(24, 24, 2);
        let net = Network::new(&cfg).unwrap();
        let p: Vec<f32> = net.init_params(3);
        let x = Tensor::from_vec(24, 24, 2, (0..24 * 24 * 2).map(|i| (i as f32 * 0.1).sin()).collect()).unwrap();
        let geoms: Vec<Geometry> = cfg
            .heads
            .iter()
            .map(|h| {
                let (hh, ww) = cfg.head_size(h);
                Geometry::new(10.0, 20.0, 0.2 / (2 * h.upsample) as f64, hh, ww).unwrap()
            })
            .collect();
        let t0 = Utc.with_ymd_and_hms(2023, 6, 1, 0, 0, 0).unwrap();
        let cube = infer(&net, &p, &x, &[15, 30, 45], &geoms, t0, 0).unwrap();
        let (err, oor) = cube.simplex_error();
        assert!(err < 1e-5 && !oor);
        let dir = tempfile::tempdir().unwrap();
        cube.write(dir.path()).unwrap();
        assert_eq!(ForecastCube::read(dir.path()).unwrap(), cube);
        assert!(cube.get(30, "aux").is_some());
        assert!(cube.get(60, "aux").is_none());
        let again = infer(&net, &p, &x, &[15, 30, 45], &geoms, t0, 0).unwrap();
        assert_eq!(again, cube);
    }
}

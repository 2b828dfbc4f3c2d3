use std::collections::BTreeSet;
use std::path::PathBuf;

use nowcast_core::calibrate::{FitMetadata, RateSet, ThresholdFitter};
use nowcast_core::geogrid::{GeoGrid, Geometry};
use nowcast_core::mosaic::{plan_mosaics, Band};
use nowcast_core::pipeline::RateBinning;
use nowcast_core::synthdata::{generate_scene, SceneParams};
use nowcast_core::verify::fss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

#[derive(Deserialize)]
struct GoldenMosaic {
    name: String,
    center_um: f64,
    satellites: Vec<String>,
}

#[test]
fn geostationary_catalog_plan_matches_golden() {
    let catalog: Vec<Band> =
        serde_json::from_str(&std::fs::read_to_string(data_dir().join("catalog/geostationary_bands.json")).unwrap())
            .unwrap();
    let golden: Vec<GoldenMosaic> =
        serde_json::from_str(&std::fs::read_to_string(data_dir().join("golden/mosaic_plan.json")).unwrap()).unwrap();
    let plan = plan_mosaics(&catalog).unwrap();
    assert!(plan.unassigned.is_empty());
    assert_eq!(plan.mosaics.len(), 18);
    for (m, g) in plan.mosaics.iter().zip(&golden) {
        assert_eq!(m.name, g.name);
        assert_eq!(m.center_um, g.center_um);
        let got: BTreeSet<&str> = m.satellites().into_iter().collect();
        let want: BTreeSet<&str> = g.satellites.iter().map(String::as_str).collect();
        assert_eq!(got, want, "{}", m.name);
    }
}

/// Brute-force CSI-maximizing threshold over `j / 100`, ties to smallest.
fn brute_force_threshold(p: &[f64], event: &[bool]) -> f64 {
    let mut best = (0u64, 1u64, 0usize);
    for j in 1..=99 {
        let t = j as f64 / 100.0;
        let (mut h, mut m, mut f) = (0u64, 0u64, 0u64);
        for (&pi, &e) in p.iter().zip(event) {
            match (pi >= t, e) {
                (true, true) => h += 1,
                (false, true) => m += 1,
                (true, false) => f += 1,
                _ => {}
            }
        }
        let d = h + m + f;
        if best.2 == 0 || (h as u128) * (best.1 as u128) > (best.0 as u128) * (d as u128) {
            best = (h, d, j);
        }
    }
    best.2 as f64 / 100.0
}

fn probability_grid(p: &[f32], bins: &RateBinning) -> GeoGrid {
    let k = bins.class_of(5.0);
    let mut data = vec![0f32; p.len() * 30];
    for (i, &v) in p.iter().enumerate() {
        data[i * 30] = 1.0 - v;
        data[i * 30 + k] = v;
    }
    let g = Geometry::new(0.0, 0.0, 0.05, 1, p.len()).unwrap();
    GeoGrid::from_parts(g, 30, data, vec![true; p.len()]).unwrap()
}

#[test]
fn ten_pixel_threshold_fit_matches_brute_force() {
    let bins = RateBinning::default();
    let p = [0.05f32, 0.12, 0.31, 0.44, 0.5, 0.58, 0.73, 0.81, 0.9, 0.97];
    let truth = [0.0f32, 2.0, 0.0, 3.0, 0.0, 1.5, 4.0, 0.0, 2.5, 6.0];
    let event: Vec<bool> = truth.iter().map(|&r| r >= 1.0).collect();
    let tg = GeoGrid::from_parts(Geometry::new(0.0, 0.0, 0.05, 1, 10).unwrap(), 1, truth.to_vec(), vec![true; 10]).unwrap();
    let mut fitter = ThresholdFitter::new(RateSet::new(vec![1.0]).unwrap(), &[60], bins.clone());
    fitter.add(60, &probability_grid(&p, &bins), &tg, None).unwrap();
    let table = fitter.finish(FitMetadata::default());
    let pf: Vec<f64> = p.iter().map(|&v| v as f64).collect();
    assert_eq!(table.entries[0].threshold, brute_force_threshold(&pf, &event));
}

#[test]
fn sharded_threshold_fit_equals_single_pass() {
    let bins = RateBinning::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p: Vec<f32> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
    let truth: Vec<f32> = p.iter().map(|&v| if rng.gen::<f32>() < v { 3.0 } else { 0.0 }).collect();
    let geom = |n| Geometry::new(0.0, 0.0, 0.05, 1, n).unwrap();
    let rates = RateSet::new(vec![1.0]).unwrap();
    let mut whole = ThresholdFitter::new(rates.clone(), &[15], bins.clone());
    let tg = GeoGrid::from_parts(geom(40), 1, truth.clone(), vec![true; 40]).unwrap();
    whole.add(15, &probability_grid(&p, &bins), &tg, None).unwrap();
    let mut a = ThresholdFitter::new(rates.clone(), &[15], bins.clone());
    let mut b = ThresholdFitter::new(rates, &[15], bins.clone());
    for (fit, range) in [(&mut a, 0..17), (&mut b, 17..40)] {
        let n = range.len();
        let t = GeoGrid::from_parts(geom(n), 1, truth[range.clone()].to_vec(), vec![true; n]).unwrap();
        fit.add(15, &probability_grid(&p[range], &bins), &t, None).unwrap();
    }
    a.merge(&b).unwrap();
    assert_eq!(a.finish(FitMetadata::default()), whole.finish(FitMetadata::default()));
}

/// Fractions over truncated in-domain, in-mask windows by direct loops.
fn fss_double_loop(f: &[bool], o: &[bool], mask: &[bool], h: usize, w: usize, n: usize) -> f64 {
    let half = (n / 2) as i64;
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if !mask[(r * w as i64 + c) as usize] {
                continue;
            }
            let (mut cnt, mut sf, mut so) = (0.0, 0.0, 0.0);
            for rr in r - half..=r + half {
                for cc in c - half..=c + half {
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let q = (rr * w as i64 + cc) as usize;
                    if mask[q] {
                        cnt += 1.0;
                        sf += f[q] as u8 as f64;
                        so += o[q] as u8 as f64;
                    }
                }
            }
            let (a, b) = (sf / cnt, so / cnt);
            num += (a - b) * (a - b);
            den += a * a + b * b;
        }
    }
    1.0 - num / den
}

#[test]
fn fss_eight_by_eight_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let geom = Geometry::new(0.0, 0.0, 0.05, 8, 8).unwrap();
    let fv: Vec<f32> = (0..64).map(|_| if rng.gen_bool(0.3) { 2.0 } else { 0.0 }).collect();
    let ov: Vec<f32> = (0..64).map(|_| if rng.gen_bool(0.3) { 2.0 } else { 0.0 }).collect();
    let mask: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.9)).collect();
    let f = GeoGrid::from_parts(geom, 1, fv.clone(), vec![true; 64]).unwrap();
    let o = GeoGrid::from_parts(geom, 1, ov.clone(), mask.clone()).unwrap();
    let fb: Vec<bool> = fv.iter().map(|&v| v >= 1.0).collect();
    let ob: Vec<bool> = ov.iter().map(|&v| v >= 1.0).collect();
    let got = fss(&f, &o, 1.0, 3).unwrap().value;
    assert!((got - fss_double_loop(&fb, &ob, &mask, 8, 8, 3)).abs() <= 1e-12);
}

#[derive(Deserialize, serde::Serialize)]
struct SceneGolden {
    steps: usize,
    sha256: String,
}

fn golden_params() -> SceneParams {
    SceneParams {
        geometry: Geometry::new(10.0, 20.0, 0.05, 64, 64).unwrap(),
        cells: 8,
        radius_px: [1.5, 4.0],
        velocity_px: [0.8, 0.3],
        velocity_jitter_px: 0.2,
        intensity_mm_hr: [1.0, 20.0],
        growth_per_step: [-0.05, 0.08],
        intensity_cap_mm_hr: 60.0,
        lifetime_steps: Some(24),
        seed: 42,
    }
}

#[test]
fn seeded_scene_matches_committed_checksum() {
    let path = data_dir().join("golden/scene_seed42.json");
    let frames = generate_scene(&golden_params(), 16).unwrap();
    let mut h = Sha256::new();
    for f in &frames {
        for v in f.data() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = hex::encode(h.finalize());
    if std::env::var_os("NOWCAST_BLESS").is_some() {
        let g = SceneGolden { steps: 16, sha256: digest.clone() };
        std::fs::write(&path, serde_json::to_string_pretty(&g).unwrap() + "\n").unwrap();
    }
    let golden: SceneGolden = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(golden.steps, 16);
    assert_eq!(digest, golden.sha256);
}

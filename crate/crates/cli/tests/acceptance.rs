use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use nowcast_cli::config::Switch;
use nowcast_cli::stages::InferenceCheck;
use nowcast_cli::{cmd_ablate, cmd_run, load_config, read_ablation, read_metrics, ablation_path, RunOptions};
use nowcast_core::calibrate::{FitMetadata, RateSet, ThresholdFitter};
use nowcast_core::geogrid::{depth_to_space, space_to_depth, GeoGrid, Geometry};
use nowcast_core::mosaic::{plan_mosaics, Band};
use nowcast_core::pipeline::RateBinning;
use nowcast_core::verify::{accumulate, csi, effective_lead, frequency_bias, fss_accum, ContingencyTable, Flag, LatencySpec};
use nowcast_model::{HeadSpec, HeadTarget, ModelConfig, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Outcome { name, pass, detail }
    }
}

fn random_grid(rng: &mut ChaCha8Rng, n: usize) -> GeoGrid {
    let geom = Geometry::new(0.0, 0.0, 0.05, n, n).unwrap();
    let data: Vec<f32> = (0..n * n)
        .map(|_| if rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(0.0f32..8.0) })
        .collect();
    let mask: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.85)).collect();
    GeoGrid::from_parts(geom, 1, data, mask).unwrap()
}

struct Brute {
    h: f64,
    m: f64,
    f: f64,
}

fn brute_counts(fc: &GeoGrid, ob: &GeoGrid, region: &[bool], rate: f64) -> Brute {
    let mut b = Brute { h: 0.0, m: 0.0, f: 0.0 };
    for p in 0..region.len() {
        if !(fc.mask()[p] && ob.mask()[p] && region[p]) {
            continue;
        }
        let (yf, yo) = (fc.data()[p] as f64 >= rate, ob.data()[p] as f64 >= rate);
        if yf && yo {
            b.h += 1.0;
        } else if yo {
            b.m += 1.0;
        } else if yf {
            b.f += 1.0;
        }
    }
    b
}

/// Fractions by explicit window loops over in-domain, jointly valid pixels.
fn brute_fss(fc: &GeoGrid, ob: &GeoGrid, region: &[bool], rate: f64, n: usize) -> Option<f64> {
    let (h, w) = (ob.height(), ob.width());
    let valid = |r: usize, c: usize| {
        let p = r * w + c;
        fc.mask()[p] && ob.mask()[p] && region[p]
    };
    let half = (n / 2) as i64;
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if !valid(r, c) {
                continue;
            }
            let (mut cnt, mut nf, mut no) = (0.0, 0.0, 0.0);
            for dr in -half..=half {
                for dc in -half..=half {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let (rr, cc) = (rr as usize, cc as usize);
                    if !valid(rr, cc) {
                        continue;
                    }
                    cnt += 1.0;
                    let p = rr * w + cc;
                    if fc.data()[p] as f64 >= rate {
                        nf += 1.0;
                    }
                    if ob.data()[p] as f64 >= rate {
                        no += 1.0;
                    }
                }
            }
            let (pf, po) = (nf / cnt, no / cnt);
            num += (pf - po) * (pf - po);
            den += pf * pf + po * po;
        }
    }
    (den != 0.0).then(|| 1.0 - num / den)
}

fn close(a: f64, defined: bool, b: Option<f64>) -> bool {
    match b {
        Some(v) => defined && (a - v).abs() <= 1e-12,
        None => !defined,
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut checks = 0;
    for _ in 0..200 {
        let fc = random_grid(&mut rng, 16);
        let ob = random_grid(&mut rng, 16);
        let region: Vec<bool> = (0..256).map(|_| rng.gen_bool(0.9)).collect();
        for &rate in &[0.2, 1.0, 5.0, 7.5] {
            let b = brute_counts(&fc, &ob, &region, rate);
            let mut t = ContingencyTable::default();
            accumulate(&fc, &ob, rate, Some(&region), &mut t).unwrap();
            let want_csi = (b.h + b.m + b.f > 0.0).then(|| b.h / (b.h + b.m + b.f));
            let want_bias = (b.h + b.m > 0.0).then(|| (b.h + b.f) / (b.h + b.m));
            let pairs = [(csi(&t), want_csi), (frequency_bias(&t), want_bias)];
            let mut all = pairs.to_vec();
            for n in [1, 3, 5] {
                let s = fss_accum(&fc, &ob, rate, n, Some(&region)).unwrap().score();
                all.push((s, brute_fss(&fc, &ob, &region, rate, n)));
            }
            for (s, want) in all {
                checks += 1;
                if !close(s.value, s.defined, want) {
                    failures += 1;
                }
                if let Some(v) = want {
                    if s.defined {
                        worst = worst.max((s.value - v).abs());
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        "metric oracles (CSI, bias, FSS n=1,3,5)",
        failures == 0 && secs < 10.0,
        format!("{checks} checks, {failures} failures, max abs error {worst:.1e}, {secs:.2}s"),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        input_height: 16,
        input_width: 16,
        input_channels: 2,
        stages: 2,
        blocks_per_stage: 1,
        stage_channels: vec![4, 6],
        crop_per_stage: 1,
        embed_dim: 3,
        kernel: 3,
        head_kernel: 3,
        heads: vec![
            HeadSpec { name: "main".into(), bins: 30, upsample: 2 },
            HeadSpec { name: "aux".into(), bins: 5, upsample: 1 },
        ],
    };
    let net = Network::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut params = net.init_params(3);
    for p in params.iter_mut() {
        *p += rng.gen_range(-0.2..0.2);
    }
    let x = Tensor::from_vec(16, 16, 2, (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let owned: Vec<(Vec<u8>, Vec<bool>)> = cfg
        .heads
        .iter()
        .map(|h| {
            let (hh, ww) = cfg.head_size(h);
            ((0..hh * ww).map(|_| rng.gen_range(0..h.bins as u8)).collect(), (0..hh * ww).map(|_| rng.gen_bool(0.7)).collect())
        })
        .collect();
    let targets: Vec<Option<HeadTarget>> = owned.iter().map(|(c, m)| Some(HeadTarget { classes: c, mask: m })).collect();
    let weights = [1.0, 1.0];
    let lead = 60;
    let mut grad = vec![0.0; net.param_count()];
    net.loss_and_grad(&params, &x, lead, &targets, &weights, 1.0, &mut grad).unwrap();
    let loss_at = |p: &[f64]| net.loss(&net.trace(p, &x, lead).unwrap(), &targets, &weights).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut abs_fail = 0;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss_at(&params);
        params[i] = orig - h;
        let down = loss_at(&params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(numeric.abs());
        if scale < 1e-7 {
            if (grad[i] - numeric).abs() >= 1e-7 {
                abs_fail += 1;
            }
            continue;
        }
        worst = worst.max((grad[i] - numeric).abs() / scale);
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        "gradient check (f64, central differences)",
        net.param_count() <= 10_000 && worst < 1e-3 && abs_fail == 0 && secs < 60.0,
        format!("{} params, max relative error {worst:.2e}, {secs:.1}s", net.param_count()),
    )
}

fn threshold_oracle() -> Outcome {
    let bins = RateBinning::default();
    let k = bins.class_of(5.0);
    let rate = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = Vec::new();
    for set in 0..50 {
        let n = rng.gen_range(5..60);
        let p: Vec<f32> = (0..n)
            .map(|_| if rng.gen_bool(0.3) { rng.gen_range(0..=100) as f32 / 100.0 } else { rng.gen_range(0.0f32..1.0) })
            .collect();
        let mut truth: Vec<f32> = p.iter().map(|&v| if rng.gen::<f32>() < v { 2.0 } else { 0.0 }).collect();
        truth[rng.gen_range(0..n)] = 3.0;
        let mut probs = vec![0f32; n * bins.bins()];
        for (i, &v) in p.iter().enumerate() {
            probs[i * bins.bins()] = 1.0 - v;
            probs[i * bins.bins() + k] = v;
        }
        let geom = Geometry::new(0.0, 0.0, 0.05, 1, n).unwrap();
        let pg = GeoGrid::from_parts(geom, bins.bins(), probs, vec![true; n]).unwrap();
        let tg = GeoGrid::from_parts(geom, 1, truth.clone(), vec![true; n]).unwrap();
        let mut fitter = ThresholdFitter::new(RateSet::new(vec![rate]).unwrap(), &[30], bins.clone());
        fitter.add(30, &pg, &tg, None).unwrap();
        let got = fitter.finish(FitMetadata::default()).entries[0].threshold;

        let mut best: Option<(f64, usize)> = None;
        for j in 1..=99usize {
            let t = j as f64 / 100.0;
            let (mut h, mut d) = (0.0, 0.0);
            for (&pi, &ti) in p.iter().zip(&truth) {
                let (yf, yo) = (pi as f64 >= t, ti as f64 >= rate);
                if yf && yo {
                    h += 1.0;
                }
                if yf || yo {
                    d += 1.0;
                }
            }
            let s = h / d;
            if best.map_or(true, |(b, _)| s > b) {
                best = Some((s, j));
            }
        }
        let want = best.unwrap().1 as f64 / 100.0;
        if got != want {
            mismatches.push(format!("set {set}: fitted {got} exhaustive {want}"));
        }
    }
    Outcome::new("threshold fit equals exhaustive search", mismatches.is_empty(), format!("50 sets, mismatches {mismatches:?}"))
}

fn latency_alignment() -> Outcome {
    let got = effective_lead(LatencySpec::new(360, 360), 60);
    Outcome::new("latency alignment", got == 420, format!("effective_lead(360/360, 60) = {got}"))
}

#[derive(Deserialize)]
struct GoldenMosaic {
    name: String,
    center_um: f64,
    satellites: Vec<String>,
}

fn mosaic_plan_golden() -> Outcome {
    let bands: Vec<Band> =
        serde_json::from_str(&std::fs::read_to_string(data_dir().join("catalog/geostationary_bands.json")).unwrap()).unwrap();
    let golden: Vec<GoldenMosaic> =
        serde_json::from_str(&std::fs::read_to_string(data_dir().join("golden/mosaic_plan.json")).unwrap()).unwrap();
    let plan = plan_mosaics(&bands).unwrap();
    let mut diffs = Vec::new();
    if plan.mosaics.len() != golden.len() {
        diffs.push(format!("{} mosaics vs {} golden", plan.mosaics.len(), golden.len()));
    }
    for (m, g) in plan.mosaics.iter().zip(&golden) {
        let got: BTreeSet<&str> = m.satellites().into_iter().collect();
        let want: BTreeSet<&str> = g.satellites.iter().map(String::as_str).collect();
        if m.name != g.name || m.center_um != g.center_um || got != want {
            diffs.push(m.name.clone());
        }
    }
    Outcome::new(
        "mosaic plan matches golden",
        plan.mosaics.len() == 18 && diffs.is_empty(),
        format!("{} mosaics, differences {diffs:?}", plan.mosaics.len()),
    )
}

fn fold_roundtrip() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ok = true;
    for _ in 0..20 {
        let (b, c) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
        let (h, w) = (b * rng.gen_range(1..6usize), b * rng.gen_range(1..6usize));
        let geom = Geometry::new(10.0, 20.0, 0.05, h, w).unwrap();
        let data: Vec<f32> = (0..h * w * c).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
        let g = GeoGrid::from_parts(geom, c, data, vec![true; h * w]).unwrap();
        let back = depth_to_space(&space_to_depth(&g, b).unwrap(), b).unwrap();
        ok &= back.data() == g.data()
            && back.mask() == g.mask()
            && back.channels() == g.channels()
            && back.geometry().matches(g.geometry());
    }
    (ok, "20 random grids, values and masks exact".into())
}

struct ToyRun {
    outcomes: Vec<Outcome>,
}

fn toy_pipeline() -> ToyRun {
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { seed: None, out: Some(dir.path().join("out")) };
    let cfg = load_config(&data_dir().join("toy/config.json"), &opts).unwrap();
    let start = Instant::now();
    let summary = cmd_run(&cfg, "all", &[], true).unwrap();
    let run_secs = start.elapsed().as_secs_f64();
    let reports = summary.out.join("reports").join(&summary.variant);
    let mut outcomes = Vec::new();

    let check: InferenceCheck =
        serde_json::from_str(&std::fs::read_to_string(reports.join("inference_check.json")).unwrap()).unwrap();
    outcomes.push(Outcome::new(
        "probability simplex over toy inference",
        check.max_simplex_error <= 1e-5 && check.negative_probabilities == 0,
        format!("max simplex error {:.2e}, negatives {}", check.max_simplex_error, check.negative_probabilities),
    ));

    let rows = read_metrics(&reports.join("metrics.csv")).unwrap();
    let value = |model: &str, metric: &str, region: &str, lead: u32| {
        rows.iter()
            .find(|r| {
                r.model == model && r.metric == metric && r.region == region && r.lead_min == lead && r.rate_mm_hr == 0.2
            })
            .filter(|r| r.defined_flag == Flag::Defined)
            .map(|r| r.value)
    };
    let leads: BTreeSet<u32> = rows.iter().filter(|r| r.model == "model").map(|r| r.lead_min).collect();
    let mut margins = Vec::new();
    let mut skill_ok = leads.iter().any(|&l| l >= 60);
    for &l in leads.iter().filter(|&&l| l >= 60) {
        match (value("model", "csi", "domain", l), value("persistence", "csi", "domain", l)) {
            (Some(m), Some(p)) => {
                margins.push(format!("{l}:{:+.3}", m - p));
                skill_ok &= m - p >= 0.05;
            }
            _ => skill_ok = false,
        }
    }
    outcomes.push(Outcome::new(
        "model beats persistence at leads >= 60 min",
        skill_ok && run_secs < 1800.0,
        format!("CSI margin at 0.2 mm/hr {margins:?}, run with verification {run_secs:.0}s"),
    ));

    let biases: Vec<(String, u32, Option<f64>)> = rows
        .iter()
        .filter(|r| r.model == "model" && r.metric == "frequency_bias" && r.rate_mm_hr == 0.2)
        .map(|r| (r.region.clone(), r.lead_min, (r.defined_flag == Flag::Defined).then_some(r.value)))
        .collect();
    let bad: Vec<_> = biases.iter().filter(|(_, _, v)| !v.is_some_and(|b| (0.5..=2.0).contains(&b))).collect();
    let (lo, hi) = biases.iter().filter_map(|b| b.2).fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    outcomes.push(Outcome::new(
        "calibrated bias at 0.2 mm/hr within [0.5, 2]",
        !biases.is_empty() && bad.is_empty(),
        format!("{} rows, range [{lo:.3}, {hi:.3}], out of range {bad:?}", biases.len()),
    ));

    let (fold_ok, fold_detail) = fold_roundtrip();
    let repro = summary.repro.clone().unwrap();
    outcomes.push(Outcome::new(
        "fold roundtrip and bit-identical rerun",
        fold_ok && repro.identical && repro.files_compared > 0,
        format!("{fold_detail}; {} artifacts compared, mismatched {:?}", repro.files_compared, repro.mismatched),
    ));

    cmd_ablate(&cfg, &[Switch::DropMosaics]).unwrap();
    let abl = read_ablation(&ablation_path(&cfg.paths.out)).unwrap();
    let mut ok = true;
    let mut means = Vec::new();
    for lead in [15, 30] {
        let d: Vec<f64> = abl.iter().filter(|r| r.switch == "drop-mosaics" && r.lead_min == lead).map(|r| r.delta_csi).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        ok &= !d.is_empty() && mean < 0.0;
        means.push(format!("{lead}:{mean:+.3}"));
    }
    outcomes.push(Outcome::new("dropping mosaics lowers CSI at leads 15 and 30", ok, format!("mean delta CSI {means:?}")));
    ToyRun { outcomes }
}

#[test]
fn acceptance() {
    println!();
    let mut results = vec![metric_oracles(), gradient_check()];
    let toy = toy_pipeline();
    let mut toy = toy.outcomes.into_iter();
    results.push(toy.next().unwrap());
    results.push(threshold_oracle());
    results.push(latency_alignment());
    results.push(mosaic_plan_golden());
    results.extend(toy);
    for (i, r) in results.iter().enumerate() {
        println!("[{}] {:>2} {}: {}", if r.pass { "PASS" } else { "FAIL" }, i + 1, r.name, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

use std::path::PathBuf;
use std::time::Instant;

use chrono::{TimeZone, Utc};
use nowcast_core::geogrid::Geometry;
use nowcast_model::config::inference_leads;
use nowcast_model::cube::infer;
use nowcast_model::{HeadSpec, ModelConfig, Network, Tensor};
use serde_json::json;
use sha2::{Digest, Sha256};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/golden/model_forward.json")
}

fn input(h: usize, w: usize, c: usize) -> Tensor<f32> {
    let data = (0..h * w * c).map(|i| ((i as f32) * 0.37).sin() * 0.8 + ((i % 7) as f32) * 0.05).collect();
    Tensor::from_vec(h, w, c, data).unwrap()
}

#[test]
fn seeded_forward_pass_matches_golden_digest() {
    let cfg = ModelConfig {
        input_height: 32,
        input_width: 32,
        input_channels: 3,
        stages: 2,
        blocks_per_stage: 2,
        stage_channels: vec![16, 16],
        crop_per_stage: 1,
        embed_dim: 8,
        kernel: 3,
        head_kernel: 3,
        heads: vec![HeadSpec { name: "main".into(), bins: 30, upsample: 1 }],
    };
    let net = Network::new(&cfg).unwrap();
    let params: Vec<f32> = net.init_params(42);
    let out = net.forward(&params, &input(32, 32, 3), 60).unwrap();
    let mut hasher = Sha256::new();
    for v in &out[0].data {
        hasher.update(v.to_le_bytes());
    }
    let digest = hex::encode(hasher.finalize());
    let path = golden_path();
    if std::env::var_os("NOWCAST_BLESS").is_some() {
        let doc = json!({"seed": 42, "lead_min": 60, "shape": [out[0].h, out[0].w, out[0].c], "sha256": digest});
        std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap() + "\n").unwrap();
    }
    let golden: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(golden["sha256"].as_str().unwrap(), digest);
}

#[test]
fn full_lead_sweep_is_fast_and_normalized() {
    let cfg = ModelConfig::desk(40, 40, 16);
    let net = Network::new(&cfg).unwrap();
    let params: Vec<f32> = net.init_params(7);
    let geoms: Vec<Geometry> = cfg
        .heads
        .iter()
        .map(|h| {
            let (hh, ww) = cfg.head_size(h);
            Geometry::new(10.0, 20.0, 0.1 / (2 * h.upsample) as f64, hh, ww).unwrap()
        })
        .collect();
    let leads = inference_leads(true);
    let t0 = Utc.with_ymd_and_hms(2023, 7, 1, 12, 0, 0).unwrap();
    let start = Instant::now();
    let cube = infer(&net, &params, &input(40, 40, 16), &leads, &geoms, t0, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("49-lead inference: {secs:.2}s");
    assert_eq!(cube.leads.len(), 49);
    let (err, out_of_range) = cube.simplex_error();
    assert!(err <= 1e-5 && !out_of_range, "simplex error {err}");
    assert!(secs < 10.0);
}

//! Parameter checkpoints: a JSON manifest plus raw little-endian `f32`
//! values of every tensor in manifest order.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::network::{Network, TensorInfo};

const FORMAT: &str = "nowcast-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub step: u64,
    pub total_steps: u64,
    pub schedule_phase: u8,
    /// Whether the values are the Polyak average rather than raw weights.
    pub averaged: bool,
    pub config: ModelConfig,
    pub tensors: Vec<TensorInfo>,
    pub data_file: String,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.f32")))
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    net: &Network,
    params: &[f32],
    step: u64,
    total_steps: u64,
    schedule_phase: u8,
    averaged: bool,
) -> Result<()> {
    if params.len() != net.param_count() {
        return Err(ModelError::Checkpoint(format!("{} values for {} parameters", params.len(), net.param_count())));
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Checkpoint("refusing to save non-finite parameters".into()));
    }
    fs::create_dir_all(dir)?;
    let (json, bin) = paths(dir, stem);
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        dtype: "f32le".into(),
        step,
        total_steps,
        schedule_phase,
        averaged,
        config: net.config.clone(),
        tensors: net.tensors().to_vec(),
        data_file: bin.file_name().unwrap().to_string_lossy().into_owned(),
    };
    fs::write(&json, serde_json::to_string_pretty(&manifest)? + "\n")?;
    let mut w = BufWriter::new(fs::File::create(&bin)?);
    for t in net.tensors() {
        for v in &params[t.range()] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(CheckpointManifest, Network, Vec<f32>)> {
    let (json, _) = paths(dir, stem);
    let manifest: CheckpointManifest = serde_json::from_reader(BufReader::new(fs::File::open(&json)?))?;
    if manifest.format != FORMAT || manifest.dtype != "f32le" {
        return Err(ModelError::Checkpoint(format!("unsupported format {} / {}", manifest.format, manifest.dtype)));
    }
    let net = Network::new(&manifest.config)?;
    if net.tensors() != manifest.tensors.as_slice() {
        return Err(ModelError::Checkpoint("tensor layout does not match the config".into()));
    }
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(dir.join(&manifest.data_file))?).read_to_end(&mut bytes)?;
    if bytes.len() != 4 * net.param_count() {
        return Err(ModelError::Checkpoint(format!("{} bytes for {} parameters", bytes.len(), net.param_count())));
    }
    let mut params = vec![0f32; net.param_count()];
    let mut chunks = bytes.chunks_exact(4);
    for t in net.tensors() {
        for v in &mut params[t.range()] {
            *v = f32::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
        }
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Checkpoint("non-finite parameter values".into()));
    }
    Ok((manifest, net, params))
}

//! Checkpoints: `manifest.json` describing named entries, and `params.bin`,
//! one flat little-endian `f32` blob holding them back to back.
//!
//! Training keeps every value `f32`-representable, so a save/load cycle is
//! exact and resuming reproduces the uninterrupted run.

use std::path::{Path, PathBuf};

use cimq_core::trainer::{EpochLog, ToyModel, TrainState};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

pub const FORMAT: &str = "cimq-checkpoint-v1";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    pub quantized: bool,
    pub psum_quant: bool,
    pub scales_ready: bool,
    pub psum_ready: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub epochs_done: usize,
    pub steps: u64,
    pub flags: Flags,
    pub entries: Vec<Entry>,
    pub log: Vec<EpochLog>,
}

fn ck_err(dir: &Path, msg: impl Into<String>) -> CliError {
    CliError::Checkpoint {
        path: dir.to_path_buf(),
        msg: msg.into(),
    }
}

fn named_entries(state: &TrainState) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = state
        .model
        .named_params()
        .into_iter()
        .map(|(n, v)| (format!("param/{n}"), v))
        .collect();
    out.extend(state.model.named_buffers().into_iter().map(|(n, v)| (format!("buffer/{n}"), v)));
    out.push(("momentum".into(), state.momentum.clone()));
    out
}

pub fn save(dir: &Path, state: &TrainState, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, values) in named_entries(state) {
        for &v in &values {
            let f = v as f32;
            if f as f64 != v && v.is_finite() {
                return Err(ck_err(dir, format!("{name} holds a value not representable as f32: {v}")));
            }
            blob.extend_from_slice(&f.to_le_bytes());
        }
        entries.push(Entry {
            name,
            offset,
            len: values.len(),
        });
        offset += values.len();
    }
    let m = &state.model;
    let manifest = Manifest {
        format: FORMAT.into(),
        config_hash: config_hash.into(),
        epochs_done: state.epochs_done,
        steps: state.steps,
        flags: Flags {
            quantized: m.quantized,
            psum_quant: m.psum_quant,
            scales_ready: m.scales_ready,
            psum_ready: m.psum_ready,
        },
        entries,
        log: state.log.clone(),
    };
    let blob_path = dir.join(BLOB);
    std::fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let man_path = dir.join(MANIFEST);
    std::fs::write(&man_path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&man_path))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ck_err(dir, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(ck_err(dir, format!("unknown format `{}`", manifest.format)));
    }
    Ok(manifest)
}

/// Restores a training state into `model`, which must have the same
/// architecture as the checkpointed one.
pub fn load(dir: &Path, model: ToyModel) -> Result<(TrainState, Manifest)> {
    let manifest = read_manifest(dir)?;
    let blob_path: PathBuf = dir.join(BLOB);
    let bytes = std::fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if bytes.len() % 4 != 0 {
        return Err(ck_err(dir, format!("blob length {} is not a multiple of 4", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let mut momentum = None;
    for e in &manifest.entries {
        let v = values
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| ck_err(dir, format!("entry {} runs past the blob", e.name)))?
            .to_vec();
        if let Some(n) = e.name.strip_prefix("param/") {
            params.push((n.to_string(), v));
        } else if let Some(n) = e.name.strip_prefix("buffer/") {
            buffers.push((n.to_string(), v));
        } else if e.name == "momentum" {
            momentum = Some(v);
        } else {
            return Err(ck_err(dir, format!("unknown entry {}", e.name)));
        }
    }
    let mut state = TrainState::new(model);
    state.model.set_named_params(&params).map_err(|e| ck_err(dir, e.to_string()))?;
    state.model.set_named_buffers(&buffers).map_err(|e| ck_err(dir, e.to_string()))?;
    let momentum = momentum.ok_or_else(|| ck_err(dir, "missing momentum"))?;
    if momentum.len() != state.momentum.len() {
        return Err(ck_err(dir, "momentum size does not match the model"));
    }
    state.momentum = momentum;
    state.model.quantized = manifest.flags.quantized;
    state.model.psum_quant = manifest.flags.psum_quant;
    state.model.scales_ready = manifest.flags.scales_ready;
    state.model.psum_ready = manifest.flags.psum_ready;
    state.epochs_done = manifest.epochs_done;
    state.steps = manifest.steps;
    state.log = manifest.log.clone();
    Ok((state, manifest))
}

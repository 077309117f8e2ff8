// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint directories: `manifest.json` plus `tensors.bin`
//! (little-endian f32, concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::model::ModelState;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::taskgen::{hex_digest, Vocab};

pub const CHECKPOINT_FORMAT: &str = "stepwise-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub vocab_fingerprint: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(state: &ModelState<f32>, dir: &Path) -> Result<CheckpointManifest> {
    state.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(state.n_params() * 4);
    let mut tensors = Vec::with_capacity(state.params.len());
    for (name, t) in state.param_names().into_iter().zip(&state.params) {
        let offset = blob.len();
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset, len: t.numel() });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        seed: state.seed,
        step: state.step,
        vocab_fingerprint: Vocab::new().fingerprint(),
        blob_sha256: hex_digest(Sha256::new_with_prefix(&blob)),
        tensors,
    };
    let blob_path = dir.join(TENSORS_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    crate::taskgen::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let m: CheckpointManifest = crate::taskgen::read_json(&path)?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &path,
            format!("format {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})", m.format, m.version),
        ));
    }
    Ok(m)
}

/// Load a checkpoint written against the built-in vocabulary.
pub fn load_checkpoint(dir: &Path) -> Result<ModelState<f32>> {
    load_checkpoint_with_vocab(dir, &Vocab::new())
}

/// Load a checkpoint, rejecting it unless its vocabulary fingerprint matches.
pub fn load_checkpoint_with_vocab(dir: &Path, vocab: &Vocab) -> Result<ModelState<f32>> {
    let m = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST_FILE);
    if m.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::format(
            &mpath,
            format!("vocabulary fingerprint {} does not match {}", m.vocab_fingerprint, vocab.fingerprint()),
        ));
    }
    if m.config.vocab_size != vocab.len() {
        return Err(Error::format(
            &mpath,
            format!("vocab_size {} but vocabulary has {} symbols", m.config.vocab_size, vocab.len()),
        ));
    }
    let bpath = dir.join(TENSORS_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if hex_digest(Sha256::new_with_prefix(&blob)) != m.blob_sha256 {
        return Err(Error::format(&bpath, "checksum mismatch"));
    }
    let specs = m.config.param_specs();
    if specs.len() != m.tensors.len() {
        return Err(Error::format(&mpath, format!("{} tensors, config needs {}", m.tensors.len(), specs.len())));
    }
    let mut params = Vec::with_capacity(specs.len());
    for ((name, shape), e) in specs.iter().zip(&m.tensors) {
        let n: usize = shape.iter().product();
        if &e.name != name || &e.shape != shape || e.len != n {
            return Err(Error::format(
                &mpath,
                format!("tensor `{}` {:?} does not match expected `{name}` {shape:?}", e.name, e.shape),
            ));
        }
        let bytes = blob
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| Error::format(&bpath, format!("tensor `{name}` out of bounds")))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.push(Tensor::new(shape.clone(), data)?);
    }
    Ok(ModelState { config: m.config, seed: m.seed, step: m.step, params })
}

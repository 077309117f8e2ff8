// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only pre-LN transformer with rotary positions, optional
//! sliding-window attention and activation capture/override hooks.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with_vocab, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION, MANIFEST_FILE, TENSORS_FILE,
};
pub use config::ModelConfig;
pub use model::{
    argmax, sliding_window_mask, ActivationCache, ActivationSite, BatchCache, Component, ForwardOptions, ModelState,
    ParamVars, Patch, Trace,
};

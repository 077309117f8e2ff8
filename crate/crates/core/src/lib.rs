// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale laboratory for implicit multi-step reasoning in small
//! transformers.
//!
//! - [`taskgen`]: synthetic modular-arithmetic chains, tokenization, datasets
//! - [`diffcore`]: dense tensors with tape-based reverse-mode autodiff
//! - [`minigpt`]: pre-LN GPT with RoPE, sliding-window masks and activation hooks
//! - [`trainer`]: AdamW with linear warmup, evaluation
//! - [`interpret`]: activation patching grids and their summary statistics
//! - [`evalsuite`]: accuracy tables, curves and SVG/CSV exports
//! - [`llmprobe`]: prompt construction and scoring for hosted chat models
//! - [`cli`]: the `stepwise` command line

pub mod cli;
pub mod diffcore;
pub mod error;
pub mod evalsuite;
pub mod interpret;
pub mod llmprobe;
pub mod minigpt;
pub mod taskgen;
pub mod trainer;

mod plot;

pub use error::{Error, Result};

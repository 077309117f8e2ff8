// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `stepwise` command line.
//!
//! Every subcommand resolves its settings from built-in defaults, then an
//! optional JSON file (`--config`), then flags. Keys are flat and dotted;
//! the flag for a key replaces dots and underscores with dashes, so
//! `model.d_model` is `--model-d-model`. Each run writes
//! `run_manifest.json` into its `--out` directory.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub use config::{flag_name, flatten, read_config_file, resolve, unflatten, Flat, RunManifest};

use crate::error::Result;
use crate::interpret::{Metric, OperandCombo};
use crate::llmprobe::PromptVariant;
use crate::taskgen::{OrderMode, Split};
use crate::trainer::LossMode;

#[derive(Debug, Parser)]
#[command(
    name = "stepwise",
    version,
    about = "Multi-step modular arithmetic: data, training, evaluation, patching and LLM probes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test datasets.
    Gen(GenFlags),
    /// Train a model on a generated dataset.
    Train(TrainFlags),
    /// Accuracy tables by step count and by VAS count.
    Eval(EvalFlags),
    /// Activation patching grids.
    Patch(PatchFlags),
    /// Accuracy against attention window size.
    Sweep(SweepFlags),
    /// Query a chat-completions endpoint with no-wrap problems.
    Probe(ProbeFlags),
    /// CSV and SVG for saved artifacts.
    Export(ExportFlags),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file of settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GenFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Training step counts as `1..N` (inclusive) or `N`.
    #[arg(long)]
    pub steps: Option<String>,
    /// Premise orders, comma separated: `forward` alone gives fixed-order
    /// data; anything else gives multi-order data tested in these orders.
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<OrderMode>>,
    /// Letter instantiations per training template.
    #[arg(long)]
    pub k: Option<usize>,
    /// Letter instantiations per test template.
    #[arg(long)]
    pub test_k: Option<usize>,
    /// Training templates per length.
    #[arg(long)]
    pub templates_per_length: Option<usize>,
    /// Test templates per length.
    #[arg(long)]
    pub test_templates_per_length: Option<usize>,
    /// Extra steps of the OOD lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ood_extra: Option<Vec<usize>>,
    /// At most this many orders per template in multi-order data.
    #[arg(long)]
    pub orders_per_template: Option<usize>,
    #[arg(long)]
    /// Generator seed.
    pub seed: Option<u64>,
    /// Step counts that also get a VAS-stratified test file.
    #[arg(long, value_delimiter = ',')]
    pub vas_steps: Option<Vec<usize>>,
    /// Problems per VAS count in stratified files.
    #[arg(long)]
    pub vas_per_cell: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Base settings: `desk` (4 layers, d=256) or `paper` (12 layers, d=768, batch 1600).
    #[arg(long)]
    pub preset: Option<String>,
    /// Transformer blocks.
    #[arg(long)]
    #[serde(rename = "model.n_layers")]
    pub model_n_layers: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    #[serde(rename = "model.n_heads")]
    pub model_n_heads: Option<usize>,
    /// Residual width; the MLP width follows as 4x unless set.
    #[arg(long)]
    #[serde(rename = "model.d_model")]
    pub model_d_model: Option<usize>,
    /// MLP hidden width.
    #[arg(long)]
    #[serde(rename = "model.d_mlp")]
    pub model_d_mlp: Option<usize>,
    /// Vocabulary size; must match the fixed vocabulary.
    #[arg(long)]
    #[serde(rename = "model.vocab_size")]
    pub model_vocab_size: Option<usize>,
    /// Longest input sequence.
    #[arg(long)]
    #[serde(rename = "model.max_seq")]
    pub model_max_seq: Option<usize>,
    /// Rotary base.
    #[arg(long)]
    #[serde(rename = "model.rope_base")]
    pub model_rope_base: Option<f64>,
    /// Standard deviation of initial weights.
    #[arg(long)]
    #[serde(rename = "model.init_std")]
    pub model_init_std: Option<f64>,
    /// Layer norm epsilon.
    #[arg(long)]
    #[serde(rename = "model.ln_eps")]
    pub model_ln_eps: Option<f64>,
    /// Share the embedding with the unembedding (`true`/`false`).
    #[arg(long)]
    #[serde(rename = "model.tie_embeddings")]
    pub model_tie_embeddings: Option<bool>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    /// Sequences per update.
    pub batch_size: Option<usize>,
    /// Decoupled weight decay on matrices.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Linear warmup length.
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    /// Optimizer updates.
    #[arg(long)]
    pub total_steps: Option<u64>,
    /// Adam first-moment decay.
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam second-moment decay.
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam epsilon.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Updates between evaluations.
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Rows per split in periodic evaluations.
    #[arg(long)]
    pub eval_max_rows: Option<usize>,
    /// Initialization and shuffling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `full_sequence` or `answer_only`.
    #[arg(long)]
    pub loss_mode: Option<LossMode>,
    /// Cosine decay after warmup (`true`/`false`).
    #[arg(long)]
    pub cosine: Option<bool>,
    /// Refuse to start above this estimated working set.
    #[arg(long)]
    pub memory_limit_bytes: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Splits for the step table, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub splits: Option<Vec<Split>>,
    /// Step counts with stratified files to tabulate by VAS count.
    #[arg(long, value_delimiter = ',')]
    pub vas_steps: Option<Vec<usize>>,
    /// Smallest acceptable VAS cell.
    #[arg(long)]
    pub min_per_cell: Option<usize>,
    /// Sliding attention window.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct PatchFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split to draw base problems from.
    #[arg(long)]
    pub split: Option<Split>,
    /// Step count of the base problems.
    #[arg(long)]
    pub n_steps: Option<usize>,
    /// Pairs per grid.
    #[arg(long)]
    pub n_pairs: Option<usize>,
    /// `resid_post`, `attn_out`, `mlp_out` (comma separated) or `all`.
    #[arg(long, value_delimiter = ',')]
    pub component: Option<Vec<String>>,
    /// Patching effect: `a`, `b` or `c`.
    #[arg(long)]
    pub metric: Option<Metric>,
    /// Layers x positions patched together, e.g. `2x2`.
    #[arg(long)]
    pub window: Option<String>,
    /// `first_operand`, `first_operator`, `operand_change`, `operator_flip`,
    /// `result_fixed` or `result_varied`.
    #[arg(long)]
    pub corrupt: Option<String>,
    /// Chain step changed by `operand_change` and `operator_flip`.
    #[arg(long)]
    pub corrupt_step: Option<usize>,
    /// Operand changed: `lhs` or `rhs` (default: the last number).
    #[arg(long)]
    pub slot: Option<String>,
    /// Variable held fixed or varied by the result kinds.
    #[arg(long)]
    pub tracked_step: Option<usize>,
    /// Keep problems whose `combo_step` has this operator-variable layout:
    /// `num_plus_var`, `var_plus_num`, `var_minus_num` or `num_minus_var`.
    #[arg(long)]
    pub combo: Option<OperandCombo>,
    /// Chain step checked by `combo`.
    #[arg(long)]
    pub combo_step: Option<usize>,
    /// Premise order of the base problems.
    #[arg(long)]
    pub order: Option<OrderMode>,
    /// Use only problems the model answers correctly (`true`/`false`).
    #[arg(long)]
    pub only_correct: Option<bool>,
    /// Corruption seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Arithmetic for the patched runs: `f32` or `f64`.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split to evaluate.
    #[arg(long)]
    pub split: Option<Split>,
    /// Window sizes: `a..b` (inclusive) or a comma list.
    #[arg(long)]
    pub sizes: Option<String>,
    /// Only problems with this many steps.
    #[arg(long)]
    pub n_steps: Option<usize>,
    /// Evaluate at most this many problems.
    #[arg(long)]
    pub max_rows: Option<usize>,
    /// Arithmetic for evaluation: `f32` or `f64`.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Chat-completions URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint.
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Sampling temperature; must be 0.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// `direct_short`, `direct_strict` or `natural_language`.
    #[arg(long)]
    pub prompt_variant: Option<PromptVariant>,
    /// Problems per VAS count.
    #[arg(long)]
    pub per_cell: Option<usize>,
    /// Premise orders, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<OrderMode>>,
    /// VAS counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub vas_counts: Option<Vec<usize>>,
    /// Problem seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent requests.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Retries after the first attempt.
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// First retry delay, doubled each retry.
    #[arg(long)]
    pub backoff_ms: Option<u64>,
    /// Per-request timeout.
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Answer from a local mock server instead: `correct`, `wrong`, `cot` or `unparseable`.
    #[arg(long)]
    pub mock: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Train logs (`.jsonl`), reports, sweeps, grids or probe reports.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<PathBuf>,
}

/// Flags that were given, as a flat layer.
fn flag_layer(flags: &impl Serialize) -> Result<Flat> {
    let mut flat = flatten(&serde_json::to_value(flags)?);
    flat.retain(|_, v| !v.is_null());
    Ok(flat)
}

/// Defaults, then the config file, then flags.
fn settings<T: Serialize + DeserializeOwned>(
    defaults: &T,
    config: Option<&Path>,
    flags: &impl Serialize,
) -> Result<(T, Flat)> {
    let layers = layers(config, flags)?;
    let borrowed: Vec<(&str, Flat)> = layers.iter().map(|(o, f)| (o.as_str(), f.clone())).collect();
    resolve(defaults, &borrowed)
}

fn layers(config: Option<&Path>, flags: &impl Serialize) -> Result<Vec<(String, Flat)>> {
    let mut out = Vec::new();
    if let Some(p) = config {
        out.push((format!("config file {}", p.display()), read_config_file(p)?));
    }
    out.push(("flags".to_string(), flag_layer(flags)?));
    Ok(out)
}

/// Last layer's value for `key`.
fn lookup<'a>(layers: &'a [(String, Flat)], key: &str) -> Option<&'a Value> {
    layers.iter().rev().find_map(|(_, f)| f.get(key))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(f) => commands::gen(f),
        Command::Train(f) => commands::train(f),
        Command::Eval(f) => commands::eval(f),
        Command::Patch(f) => commands::patch(f),
        Command::Sweep(f) => commands::sweep(f),
        Command::Probe(f) => commands::probe(f),
        Command::Export(f) => commands::export(f),
    }
}

/// Parse arguments, run, and map errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests;

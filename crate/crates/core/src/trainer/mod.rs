// SPDX-License-Identifier: MIT OR Apache-2.0

//! AdamW training loop with linear warmup, and greedy evaluation.

mod eval;
mod optim;
mod train;

pub use eval::{evaluate, outcomes, predict, Bucket, EvalReport, EVAL_BATCH};
pub use optim::{adamw_step, clip_grad_norm, decay_mask, lr_at, AdamState, LossMode, TrainConfig};
pub use train::{
    estimate_memory, loss_and_grads, make_batch, train, Batch, EvalSets, LogRecord, TrainLog, TrainOutput,
};

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probing hosted chat models on 3-step no-wrap problems: problem
//! generation, prompt rendering, answer parsing with chain-of-thought
//! exclusion, a resumable concurrent client, and accuracy reports.

mod classify;
mod client;
pub mod mock;
mod prompt;
mod run;

pub use classify::{classify_for, parse_and_classify, Classified};
pub use client::{api_key_from_env, ChatClient, Reply};
pub use prompt::{build_prompt, gen_probe_problems, plain_values, ProbeItem, PromptVariant, PROBE_STEPS};
pub use run::{
    read_records, records_path, run_probe, ProbeCell, ProbeConfig, ProbeMeta, ProbeOutput, ProbeRecord, ProbeReport,
};

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic sequential modular-arithmetic problems.
//!
//! A [`Template`] is a chain `v0=a±b, v1=v0±c | c±v0, ...` over Z/23 with
//! canonical variable names. Training templates are instantiated with `K`
//! random letter maps; test templates are rejected if any prefix of two or
//! more steps matches a training prefix, so intermediate results cannot be
//! recalled from training data.

mod chain;
mod dataset;
mod generate;
mod problem;
mod vocab;

pub use chain::{
    canonicalize, eval_chain, eval_steps, parse_premises, reduce, BinOp, Operand, Step, Template, MODULUS,
};
pub use dataset::{
    build_dataset, read_gen_config, read_problems, read_rows, write_jsonl, DatasetPaths, DatasetRow, DatasetSummary,
    ROW_SCHEMA,
};
pub(crate) use dataset::{read_json, write_json};
pub use generate::{
    all_single_step, choose_orders, filter_test_templates, gen_templates, generate_dataset, generate_vas_stratified,
    sample_template, template_space, Dataset, GenConfig, OrderRegime, PrefixSet,
};
pub(crate) use generate::{stream_rng, Stream};
pub use problem::{count_vas, order_premises, sample_letters, OrderMode, Problem, Split};
pub(crate) use vocab::hex_digest;
pub use vocab::{
    detokenize, detokenize_ids, letter_token, number_token, token_number, tokenize_text, TokenId, TokenSeq, Vocab,
    VocabEntry, VocabManifest, ARROW, BOS, COMMA, EQ, LETTER_BASE, MINUS, PAD, PLUS, QMARK, QUERY_TOKENS, STEP_TOKENS,
    VOCAB_SIZE,
};

/// Tokenize a problem into `BOS text answer`.
pub fn tokenize(p: &Problem) -> crate::error::Result<TokenSeq> {
    p.token_seq()
}

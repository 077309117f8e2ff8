// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Float;
use crate::error::Result;
use crate::minigpt::{argmax, ForwardOptions, ModelState};
use crate::taskgen::{token_number, Problem, TokenId, TokenSeq};

/// Sequences per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub n: usize,
    pub correct: usize,
}

impl Bucket {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.n as f64
        }
    }

    fn add(&mut self, ok: bool) {
        self.n += 1;
        self.correct += ok as usize;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub by_n_steps: BTreeMap<usize, Bucket>,
    pub by_n_vas: BTreeMap<usize, Bucket>,
    pub by_order_mode: BTreeMap<String, Bucket>,
}

impl EvalReport {
    pub fn from_outcomes(problems: &[Problem], correct: &[bool]) -> Self {
        let mut r = EvalReport::default();
        for (p, &ok) in problems.iter().zip(correct) {
            r.n += 1;
            r.correct += ok as usize;
            r.by_n_steps.entry(p.n_steps()).or_default().add(ok);
            r.by_n_vas.entry(p.n_vas()).or_default().add(ok);
            r.by_order_mode.entry(p.order_mode.as_str().to_string()).or_default().add(ok);
        }
        r.accuracy = if r.n == 0 { f64::NAN } else { r.correct as f64 / r.n as f64 };
        r
    }
}

/// Greedy prediction at the query position of each problem.
/// Ties go to the lowest token id.
pub fn predict<T: Float>(model: &ModelState<T>, seqs: &[TokenSeq], opts: ForwardOptions) -> Result<Vec<TokenId>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        by_len.entry(s.answer_pos).or_default().push(i);
    }
    let mut out = vec![0; seqs.len()];
    let v = model.config.vocab_size;
    for (len, idx) in by_len {
        for chunk in idx.chunks(EVAL_BATCH) {
            let batch: Vec<&[TokenId]> = chunk.iter().map(|&i| seqs[i].prompt()).collect();
            let logits = model.forward_batch(&batch, opts)?;
            for (b, &i) in chunk.iter().enumerate() {
                let row = &logits.data()[(b * len + len - 1) * v..(b * len + len) * v];
                out[i] = argmax(row) as TokenId;
            }
        }
    }
    Ok(out)
}

/// Per-problem correctness of greedy answers.
pub fn outcomes<T: Float>(model: &ModelState<T>, problems: &[Problem], window: Option<usize>) -> Result<Vec<bool>> {
    let seqs: Vec<TokenSeq> = problems.iter().map(Problem::token_seq).collect::<Result<_>>()?;
    let preds = predict(model, &seqs, ForwardOptions::window(window))?;
    Ok(problems.iter().zip(preds).map(|(p, t)| token_number(t) == Some(p.answer())).collect())
}

/// Accuracy with breakdowns by step count, VAS count and order mode.
pub fn evaluate<T: Float>(model: &ModelState<T>, problems: &[Problem], window: Option<usize>) -> Result<EvalReport> {
    let ok = outcomes(model, problems, window)?;
    Ok(EvalReport::from_outcomes(problems, &ok))
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::optim::{adamw_step, clip_grad_norm, decay_mask, lr_at, AdamState, LossMode, TrainConfig};
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::minigpt::{save_checkpoint, ForwardOptions, ModelConfig, ModelState};
use crate::taskgen::{Problem, TokenId, TokenSeq, PAD};

/// One periodic evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub id_accuracy: f64,
    /// Keyed by extra steps beyond the training maximum, e.g. `"+1"`.
    pub ood_accuracy: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(
                    serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?,
                );
            }
        }
        Ok(TrainLog { records })
    }
}

/// Held-out splits evaluated during training.
#[derive(Clone, Copy, Debug)]
pub struct EvalSets<'a> {
    pub id: &'a [Problem],
    pub ood: &'a [Problem],
    /// Longest training chain; OOD buckets are named relative to it.
    pub max_train_steps: usize,
}

pub struct TrainOutput {
    pub last: ModelState<f32>,
    /// Model with the highest ID accuracy seen at an evaluation.
    pub best: ModelState<f32>,
    pub best_step: u64,
    pub best_id_accuracy: f64,
    pub log: TrainLog,
    pub best_dir: Option<PathBuf>,
}

/// Padded batch with next-token targets.
pub struct Batch {
    pub tokens: Vec<Vec<TokenId>>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Right-pad to the longest sequence. Targets are the next token; the mask
/// selects non-padding targets (`FullSequence`) or the answer (`AnswerOnly`).
pub fn make_batch(seqs: &[&TokenSeq], mode: LossMode) -> Batch {
    let s = seqs.iter().map(|t| t.tokens.len() - 1).max().unwrap_or(0);
    let mut tokens = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len() * s);
    let mut mask = Vec::with_capacity(seqs.len() * s);
    for t in seqs {
        let mut row = t.tokens[..t.tokens.len() - 1].to_vec();
        row.resize(s, PAD);
        tokens.push(row);
        for i in 0..s {
            let tgt = t.tokens.get(i + 1).copied().unwrap_or(PAD);
            targets.push(tgt as usize);
            mask.push(match mode {
                LossMode::FullSequence => tgt != PAD,
                LossMode::AnswerOnly => i == t.query_pos(),
            });
        }
    }
    Batch { tokens, targets, mask }
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(model: &ModelState<f32>, batch: &Batch) -> Result<(f32, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let pv = model.record_params(&mut g, true);
    let rows: Vec<&[TokenId]> = batch.tokens.iter().map(Vec::as_slice).collect();
    let tr = model.record_forward(&mut g, &pv, &rows, ForwardOptions::default(), false, &[])?;
    let loss = g.cross_entropy(tr.logits, &batch.targets, &batch.mask)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    let out = pv.all.iter().zip(&model.params).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect();
    Ok((value, out))
}

/// Rough peak working set of one training step, in bytes.
pub fn estimate_memory(model: &ModelConfig, cfg: &TrainConfig, seq_len: usize) -> u64 {
    let p = model.param_count() as u64;
    let tokens = (cfg.batch_size * seq_len) as u64;
    let (d, m, h, s) = (model.d_model as u64, model.d_mlp as u64, model.n_heads as u64, seq_len as u64);
    let per_layer = tokens * (24 * d + 3 * m + 4 * h * s);
    let head = tokens * (4 * d + 3 * model.vocab_size as u64);
    // parameters, two moments, gradients, graph copy of parameters
    4 * (5 * p + model.n_layers as u64 * per_layer + head)
}

fn subsample(rows: &[Problem], cap: Option<usize>) -> Vec<Problem> {
    match cap {
        Some(c) if c < rows.len() && c > 0 => {
            let stride = rows.len() as f64 / c as f64;
            (0..c).map(|i| rows[(i as f64 * stride) as usize].clone()).collect()
        }
        _ => rows.to_vec(),
    }
}

fn eval_record(model: &ModelState<f32>, evals: &EvalSets, cap: Option<usize>) -> Result<(f64, BTreeMap<String, f64>)> {
    let id = evaluate(model, &subsample(evals.id, cap), None)?;
    let ood = evaluate(model, &subsample(evals.ood, cap), None)?;
    let ood = ood
        .by_n_steps
        .iter()
        .map(|(&n, b)| (format!("+{}", n.saturating_sub(evals.max_train_steps)), b.accuracy()))
        .collect();
    Ok((id.accuracy, ood))
}

/// Train with shuffled minibatches for `cfg.total_steps` updates.
///
/// When `out_dir` is given, the best-ID checkpoint is written to
/// `out_dir/best`, the last one to `out_dir/last`, and the log to
/// `out_dir/train_log.jsonl`.
pub fn train(
    init: ModelState<f32>,
    train_set: &[Problem],
    evals: EvalSets,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LogRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    init.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let seqs: Vec<TokenSeq> = train_set.iter().map(Problem::token_seq).collect::<Result<_>>()?;
    let max_len = seqs.iter().map(|s| s.tokens.len()).max().unwrap_or(1);
    if max_len - 1 > init.config.max_seq {
        return Err(Error::Config(format!(
            "sequences of {} tokens exceed max_seq {}",
            max_len - 1,
            init.config.max_seq
        )));
    }
    let est = estimate_memory(&init.config, cfg, max_len);
    if est > cfg.memory_limit_bytes {
        return Err(Error::Config(format!(
            "estimated working set {:.2} GiB exceeds limit {:.2} GiB; reduce batch_size or model size",
            est as f64 / (1u64 << 30) as f64,
            cfg.memory_limit_bytes as f64 / (1u64 << 30) as f64
        )));
    }
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut model = init;
    let decay = decay_mask(&model.params);
    let mut adam = AdamState::new(&model.params);
    let bs = cfg.batch_size.min(seqs.len());
    let batches_per_epoch = seqs.len() / bs;
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    let mut best = (f64::NEG_INFINITY, 0u64, model.clone());
    let (mut loss_sum, mut loss_n) = (0.0f64, 0u64);
    let best_dir = out_dir.map(|d| d.join("best"));

    for step in 0..cfg.total_steps {
        let epoch = step / batches_per_epoch as u64;
        let k = (step % batches_per_epoch as u64) as usize;
        if k == 0 {
            order = (0..seqs.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch)));
        }
        let rows: Vec<&TokenSeq> = order[k * bs..(k + 1) * bs].iter().map(|&i| &seqs[i]).collect();
        let batch = make_batch(&rows, cfg.loss_mode);
        let (loss, mut grads) = loss_and_grads(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at step {step}")));
        }
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_at(step, cfg);
        adamw_step(&mut model.params, &grads, &mut adam, cfg, lr, &decay)
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        model.step = step + 1;
        loss_sum += loss as f64;
        loss_n += 1;

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_steps {
            let (id_accuracy, ood_accuracy) = eval_record(&model, &evals, cfg.eval_max_rows)?;
            let rec =
                LogRecord { step: done, epoch, lr, train_loss: loss_sum / loss_n as f64, id_accuracy, ood_accuracy };
            (loss_sum, loss_n) = (0.0, 0);
            if id_accuracy > best.0 {
                best = (id_accuracy, done, model.clone());
                if let Some(d) = &best_dir {
                    save_checkpoint(&model, d)?;
                }
            }
            progress(&rec);
            log.records.push(rec);
            if let Some(d) = out_dir {
                log.write_jsonl(&d.join("train_log.jsonl"))?;
            }
        }
    }
    if let Some(d) = out_dir {
        save_checkpoint(&model, &d.join("last"))?;
    }
    Ok(TrainOutput { last: model, best: best.2, best_step: best.1, best_id_accuracy: best.0, log, best_dir })
}

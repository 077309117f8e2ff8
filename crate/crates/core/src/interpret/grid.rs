// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metric::{patch_effect, Metric, RunLogits};
use super::pairs::{make_pair, CorruptionKind, CorruptionSpec, PatchPair};
use crate::diffcore::{Float, Tensor};
use crate::error::{Error, Result};
use crate::minigpt::{BatchCache, Component, ForwardOptions, ModelState, Patch};
use crate::taskgen::{number_token, Problem, TokenId, Vocab, COMMA, QMARK};
use crate::trainer::{evaluate, EVAL_BATCH};

/// Mean patching effect per (layer, position) anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub component: Component,
    pub metric: Metric,
    /// (layers, tokens) covered by each anchor's window.
    pub window: (usize, usize),
    /// Symbols of the first clean prompt.
    pub tokens: Vec<String>,
    /// `values[layer][position]`.
    pub values: Vec<Vec<f64>>,
    /// Samples averaged per cell.
    pub counts: Vec<Vec<usize>>,
    /// Samples dropped for degenerate denominators, summed over cells.
    pub dropped: usize,
    /// Number of pairs.
    pub n: usize,
}

impl PatchGrid {
    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn seq_len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Mean over all layers of the given columns.
    pub fn column_mean(&self, cols: &[usize]) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for row in &self.values {
            for &c in cols {
                if let Some(v) = row.get(c).filter(|v| v.is_finite()) {
                    s += v;
                    n += 1;
                }
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    }
}

/// Prompts (without the answer token) of a set of problems.
fn prompts(problems: impl Iterator<Item = Result<Vec<TokenId>>>) -> Result<Vec<Vec<TokenId>>> {
    problems.collect()
}

fn answer_logits<T: Float>(logits: &Tensor<T>, b: usize, seq: usize, tok: TokenId) -> f64 {
    logits.row(b * seq + seq - 1)[tok as usize].as_f64()
}

/// Run the sliding-window patching grid over `pairs`.
///
/// For every anchor (layer `L`, position `P`) the corrupted activations at
/// layers `L..L+m` and positions `P..P+n` (clipped) replace the clean ones.
/// Per-sample effects are averaged with dropped samples excluded.
pub fn run_grid<T: Float>(
    model: &ModelState<T>,
    pairs: &[PatchPair],
    component: Component,
    window: (usize, usize),
    metric: Metric,
) -> Result<PatchGrid> {
    if pairs.is_empty() {
        return Err(Error::Contract("patching needs at least one pair".into()));
    }
    if window.0 == 0 || window.1 == 0 {
        return Err(Error::Config(format!("window {}x{} must be at least 1x1", window.0, window.1)));
    }
    let to_prompt = |p: &Problem| -> Result<Vec<TokenId>> { Ok(p.token_seq()?.prompt().to_vec()) };
    let clean = prompts(pairs.iter().map(|p| to_prompt(&p.clean)))?;
    let corrupt = prompts(pairs.iter().map(|p| to_prompt(&p.corrupted)))?;
    let seq = clean[0].len();
    if clean.iter().chain(&corrupt).any(|t| t.len() != seq) {
        return Err(Error::Contract("all pair prompts must have the same length".into()));
    }
    let layers = model.config.n_layers;
    let mut sums = vec![vec![0.0f64; seq]; layers];
    let mut counts = vec![vec![0usize; seq]; layers];
    let mut dropped = 0;
    let opts = ForwardOptions::default();
    let tok = |r: u8| number_token(r).expect("answer in range");

    for chunk in (0..pairs.len()).collect::<Vec<_>>().chunks(EVAL_BATCH) {
        let cb: Vec<&[TokenId]> = chunk.iter().map(|&i| clean[i].as_slice()).collect();
        let xb: Vec<&[TokenId]> = chunk.iter().map(|&i| corrupt[i].as_slice()).collect();
        let cl = model.forward_batch(&cb, opts)?;
        let (star, cache): (Tensor<T>, BatchCache<T>) = model.forward_batch_cached(&xb, opts)?;
        for l in 0..layers {
            for p in 0..seq {
                let patches = window_patches(&cache, component, l, p, window, layers, seq, chunk.len());
                let pt = model.forward_batch_patched(&cb, &patches, opts)?;
                for (b, &i) in chunk.iter().enumerate() {
                    let (r, rp) = (tok(pairs[i].r), tok(pairs[i].r_prime));
                    let lg = RunLogits {
                        cl_r: answer_logits(&cl, b, seq, r),
                        cl_rp: answer_logits(&cl, b, seq, rp),
                        pt_r: answer_logits(&pt, b, seq, r),
                        pt_rp: answer_logits(&pt, b, seq, rp),
                        star_r: answer_logits(&star, b, seq, r),
                        star_rp: answer_logits(&star, b, seq, rp),
                    };
                    match patch_effect(&lg, metric) {
                        Some(v) => {
                            sums[l][p] += v;
                            counts[l][p] += 1;
                        }
                        None => dropped += 1,
                    }
                }
            }
        }
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| s.iter().zip(c).map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect())
        .collect();
    let vocab = Vocab::new();
    let tokens = clean[0].iter().map(|&t| vocab.symbol(t).unwrap_or("?").to_string()).collect();
    Ok(PatchGrid { component, metric, window, tokens, values, counts, dropped, n: pairs.len() })
}

#[allow(clippy::too_many_arguments)]
fn window_patches<T: Float>(
    cache: &BatchCache<T>,
    component: Component,
    layer: usize,
    pos: usize,
    window: (usize, usize),
    layers: usize,
    seq: usize,
    batch: usize,
) -> Vec<Patch<T>> {
    let d = cache.tensor(component, layer).shape()[1];
    let positions: Vec<usize> = (pos..(pos + window.1).min(seq)).collect();
    (layer..(layer + window.0).min(layers))
        .map(|l| {
            let mut rows = Vec::with_capacity(batch * positions.len());
            let mut vals = Vec::with_capacity(batch * positions.len() * d);
            for b in 0..batch {
                for &p in &positions {
                    rows.push(b * seq + p);
                    vals.extend_from_slice(cache.vector(component, l, b, p));
                }
            }
            let n = rows.len();
            Patch { component, layer: l, rows, values: Tensor::new(vec![n, d], vals).expect("row-sized values") }
        })
        .collect()
}

/// Build pairs for every problem with one seeded generator per problem.
pub fn make_pairs(problems: &[Problem], spec: &CorruptionSpec, seed: u64) -> Result<Vec<PatchPair>> {
    problems
        .iter()
        .enumerate()
        .map(|(i, p)| {
            make_pair(p, spec, &mut ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
        })
        .collect()
}

/// Token positions of the `,` ending each presented premise, then the `?`.
pub fn step_boundaries(tokens: &[TokenId]) -> Vec<usize> {
    tokens.iter().enumerate().filter(|(_, &t)| t == COMMA || t == QMARK).map(|(i, _)| i).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalStats {
    pub end_of_step_mean: f64,
    pub elsewhere_mean: f64,
    pub ratio: f64,
    /// Layer of the largest effect in each boundary column.
    pub argmax_layers_per_step: Vec<usize>,
    /// Share of adjacent boundary pairs whose argmax layer does not decrease.
    pub nondecreasing_fraction: f64,
}

pub fn diagonal_stats(grid: &PatchGrid, boundaries: &[usize]) -> DiagonalStats {
    let seq = grid.seq_len();
    let ends: Vec<usize> = boundaries.iter().copied().filter(|&c| c < seq).collect();
    let others: Vec<usize> = (0..seq).filter(|c| !ends.contains(c)).collect();
    let end_of_step_mean = grid.column_mean(&ends);
    let elsewhere_mean = grid.column_mean(&others);
    let argmax_layers_per_step: Vec<usize> = ends
        .iter()
        .map(|&c| {
            let mut best = 0;
            for l in 0..grid.n_layers() {
                if grid.values[l][c] > grid.values[best][c] {
                    best = l;
                }
            }
            best
        })
        .collect();
    let pairs = argmax_layers_per_step.windows(2).count();
    let ok = argmax_layers_per_step.windows(2).filter(|w| w[1] >= w[0]).count();
    DiagonalStats {
        end_of_step_mean,
        elsewhere_mean,
        ratio: end_of_step_mean / elsewhere_mean,
        argmax_layers_per_step,
        nondecreasing_fraction: if pairs == 0 { 1.0 } else { ok as f64 / pairs as f64 },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedVaried {
    pub fixed: PatchGrid,
    pub varied: PatchGrid,
    /// First token position of the premise after the tracked one.
    pub region_start: usize,
    pub fixed_region_mean: f64,
    pub varied_region_mean: f64,
    /// Means over the changed first premise.
    pub fixed_first_step_mean: f64,
    pub varied_first_step_mean: f64,
}

/// Grids for result-fixed and result-varied pairs built from the same
/// base problems and the same first-premise change.
///
/// The region is every position from the start of the premise following
/// `tracked_step` to the end, read in presented order.
pub fn compare_fixed_varied<T: Float>(
    model: &ModelState<T>,
    problems: &[Problem],
    tracked_step: usize,
    component: Component,
    window: (usize, usize),
    metric: Metric,
    seed: u64,
) -> Result<FixedVaried> {
    let first = problems.first().ok_or_else(|| Error::Contract("no base problems".into()))?;
    if problems.iter().any(|p| p.order != first.order) {
        return Err(Error::Contract("base problems must share one premise order".into()));
    }
    let fixed_pairs = make_pairs(problems, &CorruptionSpec::result(CorruptionKind::ResultFixed, tracked_step), seed)?;
    let varied_pairs = make_pairs(problems, &CorruptionSpec::result(CorruptionKind::ResultVaried, tracked_step), seed)?;
    let fixed = run_grid(model, &fixed_pairs, component, window, metric)?;
    let varied = run_grid(model, &varied_pairs, component, window, metric)?;
    let seq = fixed.seq_len();
    let shown_at = |chain: usize| first.order.iter().position(|&c| c == chain).expect("order is a permutation");
    let next = tracked_step + 1;
    // Premise k occupies tokens 1 + 6k ..= 6 + 6k; the query follows the last one.
    let region_start = if next < first.n_steps() { 1 + 6 * shown_at(next) } else { 1 + 6 * first.n_steps() };
    let region: Vec<usize> = (region_start..seq).collect();
    let s0 = 1 + 6 * shown_at(0);
    let step0: Vec<usize> = (s0..s0 + 6).collect();
    Ok(FixedVaried {
        fixed_region_mean: fixed.column_mean(&region),
        varied_region_mean: varied.column_mean(&region),
        fixed_first_step_mean: fixed.column_mean(&step0),
        varied_first_step_mean: varied.column_mean(&step0),
        fixed,
        varied,
        region_start,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub window: usize,
    pub accuracy: f64,
    pub n: usize,
}

/// Accuracy under each attention window size.
pub fn window_sweep<T: Float>(model: &ModelState<T>, problems: &[Problem], sizes: &[usize]) -> Result<Vec<SweepPoint>> {
    sizes
        .iter()
        .map(|&w| {
            if w == 0 {
                return Err(Error::Config("window sizes must be >= 1".into()));
            }
            let r = evaluate(model, problems, Some(w))?;
            Ok(SweepPoint { window: w, accuracy: r.accuracy, n: r.n })
        })
        .collect()
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::diffcore::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Next-token loss at every non-padding position.
    #[default]
    FullSequence,
    /// Loss only where the answer is predicted.
    AnswerOnly,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_sequence" => Ok(LossMode::FullSequence),
            "answer_only" => Ok(LossMode::AnswerOnly),
            _ => Err(Error::Config(format!("unknown loss mode `{s}` (full_sequence, answer_only)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    pub eval_every: u64,
    /// Cap on rows per split for periodic evaluation; the final evaluation is complete.
    pub eval_max_rows: Option<usize>,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Cosine decay to zero after warmup instead of a constant rate.
    pub cosine: bool,
    /// Refuse to start when the estimated working set exceeds this.
    pub memory_limit_bytes: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 256,
            weight_decay: 0.1,
            warmup_steps: 2000,
            total_steps: 30_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            eval_every: 1000,
            eval_max_rows: Some(2000),
            seed: 0,
            loss_mode: LossMode::FullSequence,
            cosine: false,
            memory_limit_bytes: 4 << 30,
        }
    }
}

impl TrainConfig {
    /// 1600-sequence batches, 2000 warmup steps, weight decay 0.1, lr 1e-4.
    pub fn paper() -> Self {
        TrainConfig { batch_size: 1600, ..TrainConfig::default() }
    }

    // Negated comparisons so that NaN fails too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps must not exceed total_steps");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("weight_decay must be >= 0 and grad_clip > 0");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then constant (or cosine to 0).
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    if cfg.cosine && cfg.total_steps > cfg.warmup_steps {
        let p = ((step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64).min(1.0);
        return cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    }
    cfg.lr
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let z = |p: &Tensor<T>| Tensor::zeros(p.shape());
        AdamState { m: params.iter().map(z).collect(), v: params.iter().map(z).collect(), t: 0 }
    }
}

/// Only matrices decay; biases and layernorm parameters do not.
pub fn decay_mask<T: Float>(params: &[Tensor<T>]) -> Vec<bool> {
    params.iter().map(|p| p.rank() >= 2).collect()
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step<T: Float>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
    decay: &[bool],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || decay.len() != params.len() {
        return Err(Error::dim("adamw_step", format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::dim(
                "adamw_step",
                format!("param {i}: {:?} vs grad {:?}", params[i].shape(), g.shape()),
            ));
        }
        if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i} at coordinate {j} is {}", g.data()[j])));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() / (T::one() - T::lit(cfg.beta1.powi(t)));
    let c2 = T::one() / (T::one() - T::lit(cfg.beta2.powi(t)));
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
    let shrink = T::one() - T::lit(lr * cfg.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            if decay[i] {
                *w *= shrink;
            }
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let mh = m[j] * c1;
            let vh = v[j] * c2;
            *w -= lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

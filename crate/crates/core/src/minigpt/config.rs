// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::VOCAB_SIZE;

/// Transformer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub init_std: f64,
    pub ln_eps: f64,
    /// Reuse the token embedding as the unembedding.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// 4 layers, d=256, 4 heads.
    pub fn desk() -> Self {
        ModelConfig::with_shape(4, 4, 256)
    }

    /// 12 layers, d=768, 12 heads.
    pub fn paper() -> Self {
        ModelConfig::with_shape(12, 12, 768)
    }

    pub fn with_shape(n_layers: usize, n_heads: usize, d_model: usize) -> Self {
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_mlp: 4 * d_model,
            vocab_size: VOCAB_SIZE,
            max_seq: 64,
            rope_base: 10000.0,
            init_std: 0.02,
            ln_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    // Negated comparisons so that NaN fails too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_mlp == 0 {
            return bad("n_layers, n_heads, d_model and d_mlp must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return bad("vocab_size and max_seq must be positive".into());
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) || !(self.ln_eps > 0.0) || !(self.rope_base > 1.0) {
            return bad("init_std >= 0, ln_eps > 0 and rope_base > 1 required".into());
        }
        Ok(())
    }

    /// Names and shapes of all parameters, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m, v) = (self.d_model, self.d_mlp, self.vocab_size);
        let mut s = vec![("wte".to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("h{l}.{n}");
            s.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.w_qkv"), vec![d, 3 * d]),
                (p("attn.b_qkv"), vec![3 * d]),
                (p("attn.w_o"), vec![d, d]),
                (p("attn.b_o"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.w_in"), vec![d, m]),
                (p("mlp.b_in"), vec![m]),
                (p("mlp.w_out"), vec![m, d]),
                (p("mlp.b_out"), vec![d]),
            ]);
        }
        s.push(("ln_f.g".into(), vec![d]));
        s.push(("ln_f.b".into(), vec![d]));
        if !self.tie_embeddings {
            s.push(("w_unembed".into(), vec![d, v]));
        }
        s
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (l, d, m, v) = (self.n_layers, self.d_model, self.d_mlp, self.vocab_size);
        let block = 4 * d * d + 2 * d * m + m + 9 * d;
        v * d + l * block + 2 * d + if self.tie_embeddings { 0 } else { d * v }
    }
}

pub(crate) const PARAMS_PER_LAYER: usize = 12;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_sum_to_closed_form() {
        for tie in [false, true] {
            let cfg = ModelConfig { tie_embeddings: tie, ..ModelConfig::with_shape(3, 2, 12) };
            let n: usize = cfg.param_specs().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            assert_eq!(n, cfg.param_count());
        }
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::with_shape(1, 3, 16).validate().is_err());
        assert!(ModelConfig::with_shape(1, 4, 12).validate().is_err());
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, PARAMS_PER_LAYER};
use crate::diffcore::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::taskgen::TokenId;

/// Hookable activation of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Residual stream after the MLP addition.
    ResidPost,
    /// Attention output before it is added to the residual.
    AttnOut,
    /// MLP output before it is added to the residual.
    MlpOut,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::ResidPost, Component::AttnOut, Component::MlpOut];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::ResidPost => "resid_post",
            Component::AttnOut => "attn_out",
            Component::MlpOut => "mlp_out",
        }
    }
}

impl std::str::FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown component `{s}` (resid_post, attn_out, mlp_out)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActivationSite {
    pub component: Component,
    pub layer: usize,
    pub position: usize,
}

/// Activation vectors of one input, keyed by site.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationCache<T> {
    map: BTreeMap<ActivationSite, Vec<T>>,
}

impl<T: Float> ActivationCache<T> {
    pub fn new() -> Self {
        ActivationCache { map: BTreeMap::new() }
    }
    pub fn insert(&mut self, site: ActivationSite, v: Vec<T>) {
        self.map.insert(site, v);
    }
    pub fn get(&self, site: &ActivationSite) -> Option<&[T]> {
        self.map.get(site).map(Vec::as_slice)
    }
    pub fn len(&self) -> usize {
        self.map.len()
    }
    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
    pub fn iter(&self) -> impl Iterator<Item = (&ActivationSite, &Vec<T>)> {
        self.map.iter()
    }
}

/// Every hookable activation of a batched forward pass:
/// one `[batch * seq, d_model]` tensor per (component, layer).
#[derive(Clone, Debug)]
pub struct BatchCache<T> {
    pub batch: usize,
    pub seq: usize,
    layers: usize,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> BatchCache<T> {
    fn slot(&self, c: Component, layer: usize) -> usize {
        (c as usize) * self.layers + layer
    }

    pub fn tensor(&self, c: Component, layer: usize) -> &Tensor<T> {
        &self.tensors[self.slot(c, layer)]
    }

    pub fn vector(&self, c: Component, layer: usize, sample: usize, position: usize) -> &[T] {
        self.tensor(c, layer).row(sample * self.seq + position)
    }
}

/// Replacement rows for one (component, layer) of a batched forward pass.
/// `rows` index the flattened `[batch * seq]` axis.
#[derive(Clone, Debug)]
pub struct Patch<T> {
    pub component: Component,
    pub layer: usize,
    pub rows: Vec<usize>,
    pub values: Tensor<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Sliding attention window; `None` is plain causal attention.
    pub window: Option<usize>,
    /// Added to every rotary position.
    pub position_offset: usize,
}

impl ForwardOptions {
    pub fn window(w: Option<usize>) -> Self {
        ForwardOptions { window: w, position_offset: 0 }
    }
}

/// Additive attention mask: `-inf` where `j < max(0, i - w + 1)` or `j > i`.
pub fn sliding_window_mask<T: Float>(seq_len: usize, window: usize) -> Result<Tensor<T>> {
    if seq_len == 0 || window == 0 {
        return Err(Error::domain("sliding_window_mask", format!("seq_len {seq_len}, window {window}")));
    }
    Ok(Tensor::from_fn(&[seq_len, seq_len], |k| {
        let (i, j) = (k / seq_len, k % seq_len);
        let lo = (i + 1).saturating_sub(window);
        if j < lo || j > i {
            T::neg_infinity()
        } else {
            T::zero()
        }
    }))
}

/// Parameters plus the provenance needed to reproduce them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<Tensor<T>>,
}

struct LayerVars {
    ln1: (Var, Var),
    w_qkv: Var,
    b_qkv: Var,
    w_o: Var,
    b_o: Var,
    ln2: (Var, Var),
    w_in: Var,
    b_in: Var,
    w_out: Var,
    b_out: Var,
}

/// Parameter handles on a graph, in [`ModelConfig::param_specs`] order.
pub struct ParamVars {
    pub all: Vec<Var>,
}

impl ParamVars {
    fn layer(&self, l: usize) -> LayerVars {
        let b = 1 + l * PARAMS_PER_LAYER;
        let v = &self.all[b..b + PARAMS_PER_LAYER];
        LayerVars {
            ln1: (v[0], v[1]),
            w_qkv: v[2],
            b_qkv: v[3],
            w_o: v[4],
            b_o: v[5],
            ln2: (v[6], v[7]),
            w_in: v[8],
            b_in: v[9],
            w_out: v[10],
            b_out: v[11],
        }
    }
}

/// Result of recording a forward pass on a graph.
pub struct Trace {
    /// `[batch * seq, vocab]`.
    pub logits: Var,
    /// Captured (component, layer) activations, `[batch * seq, d_model]`.
    pub captured: Vec<(Component, usize, Var)>,
}

impl<T: Float> ModelState<T> {
    /// Weights ~ Normal(0, init_std), layernorm gains 1, all biases 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                if shape.len() >= 2 {
                    Tensor::from_fn(&shape, |_| T::lit(normal.sample(&mut rng)))
                } else if name.ends_with(".g") {
                    Tensor::full(&shape, T::one())
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Ok(ModelState { config: config.clone(), seed, step: 0, params })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_specs().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_names().iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Check shapes against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::Structure(format!(
                "{} parameter tensors, config needs {}",
                self.params.len(),
                specs.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&self.params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Structure(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Put the parameters on `g`, trainable or constant.
    pub fn record_params(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let all =
            self.params.iter().map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) }).collect();
        ParamVars { all }
    }

    /// Record the forward pass of an equal-length batch on `g`.
    pub fn record_forward(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        batch: &[&[TokenId]],
        opts: ForwardOptions,
        capture: bool,
        patches: &[Patch<T>],
    ) -> Result<Trace> {
        let cfg = &self.config;
        let (b, s) = check_batch(cfg, batch)?;
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        for p in patches {
            if p.layer >= cfg.n_layers || p.rows.iter().any(|&r| r >= b * s) {
                return Err(Error::Contract(format!(
                    "patch site {} layer {} rows {:?} outside {} layers x {} rows",
                    p.component.as_str(),
                    p.layer,
                    p.rows,
                    cfg.n_layers,
                    b * s
                )));
            }
        }
        let ids: Vec<usize> = batch.iter().flat_map(|t| t.iter().map(|&x| x as usize)).collect();
        let window = opts.window.unwrap_or(s).min(s);
        let mask = g.constant(sliding_window_mask(s, window.max(1))?);
        let positions: Vec<usize> = (0..s).map(|i| i + opts.position_offset).collect();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let eps = T::lit(cfg.ln_eps);
        let mut captured = Vec::new();

        let hook = |g: &mut Graph<T>,
                    c: Component,
                    l: usize,
                    x: Var,
                    captured: &mut Vec<(Component, usize, Var)>|
         -> Result<Var> {
            let mut x = x;
            for p in patches.iter().filter(|p| p.component == c && p.layer == l) {
                x = g.overwrite_rows(x, &p.rows, &p.values)?;
            }
            if capture {
                captured.push((c, l, x));
            }
            Ok(x)
        };

        let mut x = g.embedding(pv.all[0], &ids)?;
        for l in 0..cfg.n_layers {
            let lv = pv.layer(l);
            let hn = g.layernorm(x, lv.ln1.0, lv.ln1.1, eps)?;
            let qkv = g.matmul(hn, lv.w_qkv)?;
            let qkv = g.add_broadcast(qkv, lv.b_qkv)?;
            let qkv = g.reshape(qkv, &[b, s, 3, h, dh])?;
            let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
            let part = |g: &mut Graph<T>, i: usize| -> Result<Var> {
                let t = g.slice(qkv, 0, i, 1)?;
                g.reshape(t, &[b * h, s, dh])
            };
            let (q, k, v) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
            let q = g.rope_rotate(q, &positions, cfg.rope_base)?;
            let k = g.rope_rotate(k, &positions, cfg.rope_base)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let scores = g.add_broadcast(scores, mask)?;
            let probs = g.softmax(scores, 2)?;
            let att = g.matmul(probs, v)?;
            let att = g.reshape(att, &[b, h, s, dh])?;
            let att = g.permute(att, &[0, 2, 1, 3])?;
            let att = g.reshape(att, &[b * s, d])?;
            let att = g.matmul(att, lv.w_o)?;
            let att = g.add_broadcast(att, lv.b_o)?;
            let att = hook(g, Component::AttnOut, l, att, &mut captured)?;
            x = g.add(x, att)?;

            let hn = g.layernorm(x, lv.ln2.0, lv.ln2.1, eps)?;
            let m = g.matmul(hn, lv.w_in)?;
            let m = g.add_broadcast(m, lv.b_in)?;
            let m = g.gelu(m);
            let m = g.matmul(m, lv.w_out)?;
            let m = g.add_broadcast(m, lv.b_out)?;
            let m = hook(g, Component::MlpOut, l, m, &mut captured)?;
            x = g.add(x, m)?;
            x = hook(g, Component::ResidPost, l, x, &mut captured)?;
        }
        let n = pv.all.len();
        let (lnf_g, lnf_b) =
            if cfg.tie_embeddings { (pv.all[n - 2], pv.all[n - 1]) } else { (pv.all[n - 3], pv.all[n - 2]) };
        let x = g.layernorm(x, lnf_g, lnf_b, eps)?;
        let unembed = if cfg.tie_embeddings { g.transpose(pv.all[0])? } else { pv.all[n - 1] };
        let logits = g.matmul(x, unembed)?;
        Ok(Trace { logits, captured })
    }

    /// Logits `[seq, vocab]` for one sequence.
    pub fn forward(&self, tokens: &[TokenId], opts: ForwardOptions) -> Result<Tensor<T>> {
        self.forward_batch(&[tokens], opts)
    }

    /// Logits `[batch * seq, vocab]` for equal-length sequences.
    pub fn forward_batch(&self, batch: &[&[TokenId]], opts: ForwardOptions) -> Result<Tensor<T>> {
        self.forward_batch_patched(batch, &[], opts)
    }

    /// Forward pass with activation overrides.
    pub fn forward_batch_patched(
        &self,
        batch: &[&[TokenId]],
        patches: &[Patch<T>],
        opts: ForwardOptions,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let pv = self.record_params(&mut g, false);
        let tr = self.record_forward(&mut g, &pv, batch, opts, false, patches)?;
        Ok(g.value(tr.logits).clone())
    }

    /// Forward pass keeping every hookable activation.
    pub fn forward_batch_cached(
        &self,
        batch: &[&[TokenId]],
        opts: ForwardOptions,
    ) -> Result<(Tensor<T>, BatchCache<T>)> {
        let mut g = Graph::new();
        let pv = self.record_params(&mut g, false);
        let tr = self.record_forward(&mut g, &pv, batch, opts, true, &[])?;
        let layers = self.config.n_layers;
        let mut tensors = vec![Tensor::zeros(&[0]); 3 * layers];
        for (c, l, v) in tr.captured {
            tensors[(c as usize) * layers + l] = g.value(v).clone();
        }
        let cache = BatchCache { batch: batch.len(), seq: batch[0].len(), layers, tensors };
        Ok((g.value(tr.logits).clone(), cache))
    }

    /// Logits and the activations at `sites` for one sequence.
    pub fn forward_cached(
        &self,
        tokens: &[TokenId],
        sites: &[ActivationSite],
        opts: ForwardOptions,
    ) -> Result<(Tensor<T>, ActivationCache<T>)> {
        self.check_sites(sites.iter(), tokens.len())?;
        let (logits, full) = self.forward_batch_cached(&[tokens], opts)?;
        let mut cache = ActivationCache::new();
        for s in sites {
            cache.insert(*s, full.vector(s.component, s.layer, 0, s.position).to_vec());
        }
        Ok((logits, cache))
    }

    /// Every site of one sequence.
    pub fn all_sites(&self, seq: usize) -> Vec<ActivationSite> {
        let mut v = Vec::with_capacity(3 * self.config.n_layers * seq);
        for component in Component::ALL {
            for layer in 0..self.config.n_layers {
                for position in 0..seq {
                    v.push(ActivationSite { component, layer, position });
                }
            }
        }
        v
    }

    /// Forward pass of one sequence with each cached site substituted.
    pub fn forward_patched(
        &self,
        tokens: &[TokenId],
        overrides: &ActivationCache<T>,
        opts: ForwardOptions,
    ) -> Result<Tensor<T>> {
        self.check_sites(overrides.map.keys(), tokens.len())?;
        let d = self.config.d_model;
        let mut grouped: BTreeMap<(Component, usize), (Vec<usize>, Vec<T>)> = BTreeMap::new();
        for (site, v) in overrides.iter() {
            if v.len() != d {
                return Err(Error::dim("forward_patched", format!("override of length {} for d_model {d}", v.len())));
            }
            let e = grouped.entry((site.component, site.layer)).or_default();
            e.0.push(site.position);
            e.1.extend_from_slice(v);
        }
        let patches: Vec<Patch<T>> = grouped
            .into_iter()
            .map(|((component, layer), (rows, vals))| {
                let n = rows.len();
                Patch { component, layer, rows, values: Tensor::from_parts(vec![n, d], vals) }
            })
            .collect();
        self.forward_batch_patched(&[tokens], &patches, opts)
    }

    fn check_sites<'a>(&self, sites: impl Iterator<Item = &'a ActivationSite>, seq: usize) -> Result<()> {
        for s in sites {
            if s.layer >= self.config.n_layers || s.position >= seq {
                return Err(Error::Contract(format!(
                    "site {} layer {} position {} outside {} layers x {seq} positions",
                    s.component.as_str(),
                    s.layer,
                    s.position,
                    self.config.n_layers
                )));
            }
        }
        Ok(())
    }
}

fn check_batch(cfg: &ModelConfig, batch: &[&[TokenId]]) -> Result<(usize, usize)> {
    let s = batch.first().map(|t| t.len()).ok_or_else(|| Error::Contract("empty batch".into()))?;
    if s == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    if s > cfg.max_seq {
        return Err(Error::Contract(format!("sequence length {s} exceeds max_seq {}", cfg.max_seq)));
    }
    for t in batch {
        if t.len() != s {
            return Err(Error::Contract(format!("mixed sequence lengths {s} and {}", t.len())));
        }
        if let Some(&bad) = t.iter().find(|&&x| x as usize >= cfg.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
        }
    }
    Ok((batch.len(), s))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Template sampling, the train/test prefix filter, and dataset assembly.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, stream tag, length, index)`, so a template's content never
//! depends on how many other templates were drawn before it.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::chain::{BinOp, Operand, Step, Template, MODULUS};
use super::problem::{order_premises, sample_letters, OrderMode, Problem, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Distinct training templates for each length >= 2.
    pub templates_per_length: usize,
    /// Candidate test templates kept per test length (after filtering).
    pub test_templates_per_length: usize,
    /// Letter instantiations per training template.
    pub k: usize,
    /// Letter instantiations per test template.
    pub test_k: usize,
    pub max_train_steps_len: usize,
    /// OOD lengths are `max_train_steps_len + e` for each `e` here.
    pub ood_extra: Vec<usize>,
    /// `m` in the "at most m orders per template" multi-order datasets.
    pub orders_per_template: usize,
    pub modulus: u8,
    pub seed: u64,
    /// Orders each test problem is emitted in. `None` picks forward for the
    /// fixed-order regime and forward/reverse/random for multi-order.
    pub test_orders: Option<Vec<OrderMode>>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            templates_per_length: 25_000,
            test_templates_per_length: 1_000,
            k: 2,
            test_k: 1,
            max_train_steps_len: 5,
            ood_extra: vec![1, 2],
            orders_per_template: 5,
            modulus: MODULUS,
            seed: 0,
            test_orders: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modulus != MODULUS {
            return Err(Error::Config(format!("modulus must be {MODULUS}, got {}", self.modulus)));
        }
        if self.k == 0 || self.test_k == 0 {
            return Err(Error::Config("k and test_k must be >= 1".into()));
        }
        if self.orders_per_template == 0 {
            return Err(Error::Config("orders_per_template must be >= 1".into()));
        }
        if self.max_train_steps_len == 0 {
            return Err(Error::Config("max_train_steps_len must be >= 1".into()));
        }
        if self.max_train_steps_len + self.ood_extra.iter().copied().max().unwrap_or(0) > 26 {
            return Err(Error::Config("chains longer than 26 steps cannot be lettered".into()));
        }
        Ok(())
    }

    pub fn ood_lengths(&self) -> Vec<usize> {
        self.ood_extra.iter().filter(|&&e| e > 0).map(|e| self.max_train_steps_len + e).collect()
    }

    fn test_orders_for(&self, regime: OrderRegime) -> Vec<OrderMode> {
        self.test_orders.clone().unwrap_or_else(|| match regime {
            OrderRegime::FixedForward => vec![OrderMode::Forward],
            OrderRegime::MultiOrder => vec![OrderMode::Forward, OrderMode::Reverse, OrderMode::Random],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderRegime {
    FixedForward,
    MultiOrder,
}

/// Stream tags separating independent uses of the seed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    TrainTemplates = 1,
    TestTemplates = 2,
    TrainInstances = 3,
    TestInstances = 4,
    Stratified = 5,
    Probe = 6,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic RNG for `(seed, stream, a, b)`.
pub(crate) fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for v in [stream as u64, a, b] {
        h = splitmix(h ^ v);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Number of distinct canonical templates of a given length.
pub fn template_space(length: usize) -> f64 {
    let first = (MODULUS as f64).powi(2) * 2.0;
    first * (2.0 * 2.0 * MODULUS as f64).powi(length.saturating_sub(1) as i32)
}

/// Draw one template: ops uniform, variable before/after the operator
/// uniform, numbers uniform.
pub fn sample_template<R: Rng + ?Sized>(rng: &mut R, length: usize) -> Template {
    let mut steps = Vec::with_capacity(length);
    let op = |rng: &mut R| if rng.random_bool(0.5) { BinOp::Plus } else { BinOp::Minus };
    let a = rng.random_range(0..MODULUS);
    let o = op(rng);
    let b = rng.random_range(0..MODULUS);
    steps.push(Step { target: 0, lhs: Operand::Number(a), op: o, rhs: Operand::Number(b) });
    for i in 1..length {
        let o = op(rng);
        let var_first = rng.random_bool(0.5);
        let n = Operand::Number(rng.random_range(0..MODULUS));
        let v = Operand::Variable(i - 1);
        let (lhs, rhs) = if var_first { (v, n) } else { (n, v) };
        steps.push(Step { target: i, lhs, op: o, rhs });
    }
    Template::new(steps).expect("sampled templates are valid chains")
}

/// All 23*23*2 single-step templates.
pub fn all_single_step() -> Vec<Template> {
    let mut out = Vec::with_capacity(1058);
    for a in 0..MODULUS {
        for op in [BinOp::Plus, BinOp::Minus] {
            for b in 0..MODULUS {
                out.push(
                    Template::new(vec![Step { target: 0, lhs: Operand::Number(a), op, rhs: Operand::Number(b) }])
                        .expect("valid"),
                );
            }
        }
    }
    out
}

/// Training templates for one length: every combination for length 1,
/// otherwise `templates_per_length` distinct samples.
pub fn gen_templates(cfg: &GenConfig, length: usize) -> Result<Vec<Template>> {
    if length == 0 {
        return Err(Error::Config("template length must be >= 1".into()));
    }
    if length == 1 {
        return Ok(all_single_step());
    }
    sample_distinct(cfg.seed, Stream::TrainTemplates, length, cfg.templates_per_length, |_| true)
}

/// Rejection-sample `count` distinct templates accepted by `keep`.
pub(crate) fn sample_distinct(
    seed: u64,
    stream: Stream,
    length: usize,
    count: usize,
    mut keep: impl FnMut(&Template) -> bool,
) -> Result<Vec<Template>> {
    let space = template_space(length);
    if count as f64 > space {
        return Err(Error::Exhausted(format!(
            "requested {count} distinct {length}-step templates but only {space} exist"
        )));
    }
    let max_attempts = (count as u64).saturating_mul(200).max(100_000);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempt = 0u64;
    while out.len() < count {
        if attempt >= max_attempts {
            return Err(Error::Exhausted(format!(
                "only {} of {count} {length}-step templates survived after {attempt} draws",
                out.len()
            )));
        }
        let mut rng = stream_rng(seed, stream, length as u64, attempt);
        attempt += 1;
        let t = sample_template(&mut rng, length);
        let key = t.canonical();
        if seen.contains(&key) || !keep(&t) {
            continue;
        }
        seen.insert(key);
        out.push(t);
    }
    Ok(out)
}

/// Canonical prefixes (length >= 2) of every training template.
#[derive(Clone, Debug, Default)]
pub struct PrefixSet {
    prefixes: HashSet<String>,
}

impl PrefixSet {
    pub fn from_templates<'a>(train: impl IntoIterator<Item = &'a Template>) -> Self {
        let mut prefixes = HashSet::new();
        for t in train {
            prefixes.extend(t.canonical_prefixes());
        }
        PrefixSet { prefixes }
    }

    pub fn len(&self) -> usize {
        self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    /// True when any >=2-step prefix of `t` was seen in training.
    pub fn collides(&self, t: &Template) -> bool {
        (2..=t.n_steps()).any(|k| self.prefixes.contains(&super::chain::canonicalize(&t.steps()[..k])))
    }
}

/// Keep the candidates whose every >=2-step canonical prefix is absent
/// from the training templates' prefixes.
pub fn filter_test_templates(train: &[Template], candidates: &[Template]) -> Vec<Template> {
    let set = PrefixSet::from_templates(train);
    candidates.iter().filter(|t| !set.collides(t)).cloned().collect()
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::with_capacity(factorial(n));
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Up to `m` distinct premise orders: all of them when `n! <= m`,
/// otherwise `m` sampled without replacement.
pub fn choose_orders<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> Vec<Vec<usize>> {
    if n <= 8 && factorial(n) <= m {
        return all_permutations(n);
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let mut o: Vec<usize> = (0..n).collect();
        o.shuffle(rng);
        if seen.insert(o.clone()) {
            out.push(o);
        }
    }
    out
}

/// `k` distinct injective letter maps for an `n`-step template.
fn letter_maps<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<Vec<char>> {
    let mut out: Vec<Vec<char>> = Vec::with_capacity(k);
    while out.len() < k {
        let l = sample_letters(rng, n);
        if !out.contains(&l) {
            out.push(l);
        }
    }
    out
}

/// All three splits held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Problem>,
    pub test_id: Vec<Problem>,
    pub test_ood: Vec<Problem>,
    /// Training templates by length, kept for later filtering.
    pub train_templates: BTreeMap<usize, Vec<Template>>,
}

impl Dataset {
    pub fn prefix_set(&self) -> PrefixSet {
        PrefixSet::from_templates(self.train_templates.values().flatten())
    }
}

/// Generate train / ID test / OOD test problems.
pub fn generate_dataset(cfg: &GenConfig, regime: OrderRegime) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset::default();
    for length in 1..=cfg.max_train_steps_len {
        let templates = gen_templates(cfg, length)?;
        for (ti, t) in templates.iter().enumerate() {
            let mut rng = stream_rng(cfg.seed, Stream::TrainInstances, length as u64, ti as u64);
            for letters in letter_maps(&mut rng, length, cfg.k) {
                let base = Problem::new(t.clone(), letters, Split::Train)?;
                match regime {
                    OrderRegime::FixedForward => ds.train.push(base),
                    OrderRegime::MultiOrder => {
                        for order in choose_orders(&mut rng, length, cfg.orders_per_template) {
                            let mode = OrderMode::classify(&order);
                            ds.train.push(base.with_order(order, mode));
                        }
                    }
                }
            }
        }
        ds.train_templates.insert(length, templates);
    }

    let prefixes = ds.prefix_set();
    let orders = cfg.test_orders_for(regime);
    let id_lengths: Vec<usize> = (2..=cfg.max_train_steps_len).collect();
    for (lengths, split) in [(id_lengths, Split::TestId), (cfg.ood_lengths(), Split::TestOod)] {
        for length in lengths {
            let templates =
                sample_distinct(cfg.seed, Stream::TestTemplates, length, cfg.test_templates_per_length, |t| {
                    !prefixes.collides(t)
                })?;
            let rows = instantiate_tests(cfg.seed, &templates, cfg.test_k, &orders, split, length)?;
            match split {
                Split::TestId => ds.test_id.extend(rows),
                _ => ds.test_ood.extend(rows),
            }
        }
    }
    Ok(ds)
}

fn instantiate_tests(
    seed: u64,
    templates: &[Template],
    k: usize,
    orders: &[OrderMode],
    split: Split,
    length: usize,
) -> Result<Vec<Problem>> {
    let mut out = Vec::new();
    for (ti, t) in templates.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::TestInstances, length as u64, ti as u64);
        for letters in letter_maps(&mut rng, t.n_steps(), k) {
            let base = Problem::new(t.clone(), letters, split)?;
            for &mode in orders {
                out.push(order_premises(&base, mode, &mut rng)?);
            }
        }
    }
    Ok(out)
}

/// Test problems of one length with at least `per_cell` problems in every
/// variable-as-subtrahend bucket `0..=n_steps-1`, each emitted once per
/// order in `orders`. Templates respect the training prefix filter.
pub fn generate_vas_stratified(
    seed: u64,
    prefixes: &PrefixSet,
    n_steps: usize,
    per_cell: usize,
    orders: &[OrderMode],
    split: Split,
) -> Result<Vec<Problem>> {
    if n_steps < 2 {
        return Err(Error::Config("stratification needs at least 2 steps".into()));
    }
    let mut buckets: Vec<Vec<Template>> = vec![Vec::new(); n_steps];
    let mut seen = HashSet::new();
    let max_attempts: u64 = 20_000_000;
    let mut attempt = 0u64;
    while buckets.iter().any(|b| b.len() < per_cell) {
        if attempt >= max_attempts {
            let deficit: Vec<String> = buckets
                .iter()
                .enumerate()
                .filter(|(_, b)| b.len() < per_cell)
                .map(|(v, b)| format!("n_vas={v}: need {} more", per_cell - b.len()))
                .collect();
            return Err(Error::Exhausted(format!("stratified {n_steps}-step generation: {}", deficit.join(", "))));
        }
        let mut rng = stream_rng(seed, Stream::Stratified, n_steps as u64, attempt);
        attempt += 1;
        let t = sample_template(&mut rng, n_steps);
        let bucket = &mut buckets[t.n_vas()];
        if bucket.len() >= per_cell || prefixes.collides(&t) || !seen.insert(t.canonical()) {
            continue;
        }
        bucket.push(t);
    }
    let templates: Vec<Template> = buckets.into_iter().flatten().collect();
    let mut out = Vec::with_capacity(templates.len() * orders.len());
    for (ti, t) in templates.iter().enumerate() {
        let mut rng = stream_rng(seed ^ 0x5bd1_e995, Stream::Stratified, n_steps as u64, ti as u64);
        let base = Problem::new(t.clone(), sample_letters(&mut rng, n_steps), split)?;
        for &mode in orders {
            out.push(order_premises(&base, mode, &mut rng)?);
        }
    }
    Ok(out)
}

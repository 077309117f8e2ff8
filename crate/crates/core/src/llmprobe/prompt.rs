// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::{
    order_premises, sample_letters, sample_template, stream_rng, BinOp, Operand, OrderMode, Problem, Split, Step,
    Stream, Template,
};

/// Probe problems always have this many steps.
pub const PROBE_STEPS: usize = 3;

const MAX_ATTEMPTS: u64 = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// Equations, then a request to answer directly.
    DirectShort,
    /// Equations, then a stricter answer-only instruction.
    DirectStrict,
    /// Apples word problem.
    NaturalLanguage,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 3] =
        [PromptVariant::DirectShort, PromptVariant::DirectStrict, PromptVariant::NaturalLanguage];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::DirectShort => "direct_short",
            PromptVariant::DirectStrict => "direct_strict",
            PromptVariant::NaturalLanguage => "natural_language",
        }
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt variant `{s}`")))
    }
}

/// Step values computed over plain integers, or `None` if any leaves [0, 22].
pub fn plain_values(template: &Template) -> Option<Vec<i64>> {
    let mut vals: Vec<i64> = Vec::with_capacity(template.n_steps());
    for s in template.steps() {
        let get = |o: &Operand<usize>| match *o {
            Operand::Number(n) => n as i64,
            Operand::Variable(v) => vals[v],
        };
        let (l, r) = (get(&s.lhs), get(&s.rhs));
        let v = match s.op {
            BinOp::Plus => l + r,
            BinOp::Minus => l - r,
        };
        if !(0..=22).contains(&v) {
            return None;
        }
        vals.push(v);
    }
    Some(vals)
}

/// One probe problem rendered in each requested order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeItem {
    /// Forward-order base problem.
    pub base: Problem,
    pub variants: Vec<Problem>,
}

/// `per_cell` distinct 3-step no-wrap problems for each VAS count in
/// `vas_counts`, each emitted once per order. The same base problem feeds
/// every order.
pub fn gen_probe_problems(
    per_cell: usize,
    vas_counts: &[usize],
    orders: &[OrderMode],
    seed: u64,
) -> Result<Vec<ProbeItem>> {
    if let Some(&bad) = vas_counts.iter().find(|&&v| v >= PROBE_STEPS) {
        return Err(Error::Config(format!("VAS count {bad} impossible for {PROBE_STEPS}-step problems")));
    }
    let mut out = Vec::new();
    for &v in vas_counts {
        let mut seen = HashSet::new();
        let mut templates = Vec::with_capacity(per_cell);
        let mut attempt = 0u64;
        while templates.len() < per_cell {
            if attempt >= MAX_ATTEMPTS {
                return Err(Error::Exhausted(format!(
                    "probe problems with {v} variable subtrahends: found {}, need {} more",
                    templates.len(),
                    per_cell - templates.len()
                )));
            }
            let mut rng = stream_rng(seed, Stream::Probe, v as u64, attempt);
            attempt += 1;
            let t = sample_template(&mut rng, PROBE_STEPS);
            if t.n_vas() == v && plain_values(&t).is_some() && seen.insert(t.canonical()) {
                templates.push(t);
            }
        }
        for (i, t) in templates.into_iter().enumerate() {
            let mut rng = stream_rng(seed, Stream::Probe, 100 + v as u64, i as u64);
            let base = Problem::new(t, sample_letters(&mut rng, PROBE_STEPS), Split::TestOod)?;
            let variants = orders.iter().map(|&m| order_premises(&base, m, &mut rng)).collect::<Result<_>>()?;
            out.push(ProbeItem { base, variants });
        }
    }
    Ok(out)
}

fn operand(o: &Operand<char>) -> String {
    match o {
        Operand::Number(n) => n.to_string(),
        Operand::Variable(c) => c.to_string(),
    }
}

fn apples(o: &Operand<char>) -> String {
    match o {
        Operand::Number(n) => n.to_string(),
        Operand::Variable(c) => format!("{}'s number of apples", c.to_ascii_uppercase()),
    }
}

fn equations(steps: &[Step<char>]) -> String {
    let mut s = String::new();
    for st in steps {
        let _ = writeln!(s, "{} = {} {} {}", st.target, operand(&st.lhs), st.op.symbol(), operand(&st.rhs));
    }
    s
}

/// Prompt text for `problem` in its presented premise order.
pub fn build_prompt(problem: &Problem, variant: PromptVariant) -> String {
    let steps = problem.presented_steps();
    let q = problem.query_letter();
    match variant {
        PromptVariant::DirectShort => {
            format!("{}What is the value of {q}? Please answer directly with \"{q} = xx\".", equations(&steps))
        }
        PromptVariant::DirectStrict => format!(
            "{}What is the value of {q}? You must answer directly. Only output the final result. Begin your answer with \"{q} = xx\".",
            equations(&steps)
        ),
        PromptVariant::NaturalLanguage => {
            let mut s = String::new();
            for st in &steps {
                let word = match st.op {
                    BinOp::Plus => "plus",
                    BinOp::Minus => "minus",
                };
                let _ = writeln!(
                    s,
                    "{}'s number of apples equals {} {word} {}. ",
                    st.target.to_ascii_uppercase(),
                    apples(&st.lhs),
                    apples(&st.rhs)
                );
            }
            let _ = write!(
                s,
                "How many apples does {} have? Only output the final result. Do not output intermediate results.",
                q.to_ascii_uppercase()
            );
            s
        }
    }
}

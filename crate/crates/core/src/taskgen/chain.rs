// SPDX-License-Identifier: MIT OR Apache-2.0

//! Equation chains: operands, steps, canonical templates and their
//! evaluation over Z/23.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All arithmetic is carried out modulo this value.
pub const MODULUS: u8 = 23;

/// Reduce any integer into `0..MODULUS`.
pub fn reduce(x: i64) -> u8 {
    x.rem_euclid(MODULUS as i64) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinOp {
    Plus,
    Minus,
}

impl BinOp {
    pub fn symbol(self) -> char {
        match self {
            BinOp::Plus => '+',
            BinOp::Minus => '-',
        }
    }

    pub fn flipped(self) -> BinOp {
        match self {
            BinOp::Plus => BinOp::Minus,
            BinOp::Minus => BinOp::Plus,
        }
    }

    /// `lhs op rhs` reduced mod 23.
    pub fn apply(self, lhs: u8, rhs: u8) -> u8 {
        match self {
            BinOp::Plus => reduce(lhs as i64 + rhs as i64),
            BinOp::Minus => reduce(lhs as i64 - rhs as i64),
        }
    }
}

/// A number in `0..23` or a reference to a variable name `V`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand<V> {
    Number(u8),
    Variable(V),
}

impl<V> Operand<V> {
    pub fn is_variable(&self) -> bool {
        matches!(self, Operand::Variable(_))
    }

    pub fn number(&self) -> Option<u8> {
        match self {
            Operand::Number(n) => Some(*n),
            Operand::Variable(_) => None,
        }
    }

    pub fn map_var<W>(&self, f: impl FnOnce(&V) -> W) -> Operand<W> {
        match self {
            Operand::Number(n) => Operand::Number(*n),
            Operand::Variable(v) => Operand::Variable(f(v)),
        }
    }
}

/// `target = lhs op rhs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Step<V> {
    pub target: V,
    pub lhs: Operand<V>,
    pub op: BinOp,
    pub rhs: Operand<V>,
}

impl<V> Step<V> {
    /// True when the step has the form `number - variable`.
    pub fn variable_is_subtrahend(&self) -> bool {
        self.op == BinOp::Minus && self.rhs.is_variable()
    }

    pub fn map_vars<W>(&self, mut f: impl FnMut(&V) -> W) -> Step<W> {
        Step { target: f(&self.target), lhs: self.lhs.map_var(&mut f), op: self.op, rhs: self.rhs.map_var(&mut f) }
    }
}

impl<V: fmt::Display> fmt::Display for Step<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}=", self.target)?;
        write_operand(f, &self.lhs)?;
        write!(f, "{}", self.op.symbol())?;
        write_operand(f, &self.rhs)
    }
}

fn write_operand<V: fmt::Display>(f: &mut fmt::Formatter<'_>, o: &Operand<V>) -> fmt::Result {
    match o {
        Operand::Number(n) => write!(f, "{n}"),
        Operand::Variable(v) => write!(f, "{v}"),
    }
}

/// Evaluate a list of steps in the given order, returning the value of the
/// last step's target.
pub fn eval_steps<V: Eq + Hash + Clone + fmt::Debug>(steps: &[Step<V>]) -> Result<u8> {
    let mut env: HashMap<V, u8> = HashMap::new();
    let mut last = None;
    for (i, s) in steps.iter().enumerate() {
        let get = |o: &Operand<V>| -> Result<u8> {
            match o {
                Operand::Number(n) if *n < MODULUS => Ok(*n),
                Operand::Number(n) => Err(Error::Structure(format!("step {}: operand {n} out of range", i + 1))),
                Operand::Variable(v) => env
                    .get(v)
                    .copied()
                    .ok_or_else(|| Error::Structure(format!("step {}: variable {v:?} used before definition", i + 1))),
            }
        };
        let value = s.op.apply(get(&s.lhs)?, get(&s.rhs)?);
        env.insert(s.target.clone(), value);
        last = Some(value);
    }
    last.ok_or_else(|| Error::Structure("empty chain".into()))
}

/// Rename variables to `v0, v1, ...` in order of first appearance and
/// serialize as `v0=1+2,v1=3-v0`.
pub fn canonicalize<V: Eq + Hash + Clone>(steps: &[Step<V>]) -> String {
    let mut names: HashMap<V, usize> = HashMap::new();
    let mut out = String::new();
    for (i, s) in steps.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        // Operands are read before the target is written.
        let lhs = canonical_operand(&s.lhs, &mut names);
        let rhs = canonical_operand(&s.rhs, &mut names);
        let next = names.len();
        let t = *names.entry(s.target.clone()).or_insert(next);
        out.push_str(&format!("v{t}={lhs}{}{rhs}", s.op.symbol()));
    }
    out
}

fn canonical_operand<V: Eq + Hash + Clone>(o: &Operand<V>, names: &mut HashMap<V, usize>) -> String {
    match o {
        Operand::Number(n) => n.to_string(),
        Operand::Variable(v) => {
            let next = names.len();
            format!("v{}", names.entry(v.clone()).or_insert(next))
        }
    }
}

/// A sequential chain with canonical variable indices: step `i` defines
/// variable `i`, and every step after the first reads variable `i - 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Template {
    steps: Vec<Step<usize>>,
}

impl Template {
    /// Validate and wrap a list of canonical steps.
    pub fn new(steps: Vec<Step<usize>>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Structure("template has no steps".into()));
        }
        for (i, s) in steps.iter().enumerate() {
            if s.target != i {
                return Err(Error::Structure(format!("step {} defines v{} (expected v{i})", i + 1, s.target)));
            }
            for o in [&s.lhs, &s.rhs] {
                if let Operand::Number(n) = o {
                    if *n >= MODULUS {
                        return Err(Error::Structure(format!("step {}: operand {n} out of range", i + 1)));
                    }
                }
            }
            let vars: Vec<usize> = [s.lhs, s.rhs]
                .iter()
                .filter_map(|o| match o {
                    Operand::Variable(v) => Some(*v),
                    Operand::Number(_) => None,
                })
                .collect();
            match (i, vars.as_slice()) {
                (0, []) => {}
                (0, _) => return Err(Error::Structure("first step must combine two numbers".into())),
                (_, [v]) if *v + 1 == i => {}
                (_, [v]) => {
                    return Err(Error::Structure(format!("step {} reads v{v}, expected v{}", i + 1, i - 1)));
                }
                _ => return Err(Error::Structure(format!("step {} must have exactly one variable operand", i + 1))),
            }
        }
        Ok(Template { steps })
    }

    /// Build from letter-named steps given in chain order.
    pub fn from_named<V: Eq + Hash + Clone + fmt::Debug>(steps: &[Step<V>]) -> Result<(Self, Vec<V>)> {
        let mut index: HashMap<V, usize> = HashMap::new();
        let mut names = Vec::new();
        let mut canon = Vec::with_capacity(steps.len());
        for (i, s) in steps.iter().enumerate() {
            let resolve = |o: &Operand<V>| -> Result<Operand<usize>> {
                match o {
                    Operand::Number(n) => Ok(Operand::Number(*n)),
                    Operand::Variable(v) => index.get(v).map(|&ix| Operand::Variable(ix)).ok_or_else(|| {
                        Error::Structure(format!("step {}: variable {v:?} used before definition", i + 1))
                    }),
                }
            };
            let lhs = resolve(&s.lhs)?;
            let rhs = resolve(&s.rhs)?;
            if index.insert(s.target.clone(), i).is_some() {
                return Err(Error::Structure(format!("variable {:?} defined twice", s.target)));
            }
            names.push(s.target.clone());
            canon.push(Step { target: i, lhs, op: s.op, rhs });
        }
        Ok((Template::new(canon)?, names))
    }

    pub fn steps(&self) -> &[Step<usize>] {
        &self.steps
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Value of the final variable.
    pub fn answer(&self) -> u8 {
        eval_chain(self)
    }

    /// Values of every variable in definition order.
    pub fn values(&self) -> Vec<u8> {
        let mut vals: Vec<u8> = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let get = |o: &Operand<usize>| match o {
                Operand::Number(n) => *n,
                Operand::Variable(v) => vals[*v],
            };
            let v = s.op.apply(get(&s.lhs), get(&s.rhs));
            vals.push(v);
        }
        vals
    }

    pub fn n_vas(&self) -> usize {
        self.steps.iter().filter(|s| s.variable_is_subtrahend()).count()
    }

    pub fn canonical(&self) -> String {
        canonicalize(&self.steps)
    }

    /// Canonical strings of every prefix with at least two steps.
    pub fn canonical_prefixes(&self) -> Vec<String> {
        (2..=self.steps.len()).map(|k| canonicalize(&self.steps[..k])).collect()
    }
}

/// Evaluate a template left to right over Z/23.
pub fn eval_chain(template: &Template) -> u8 {
    *template.values().last().expect("templates are non-empty")
}

/// Parse `a=4+6,d=a+5` (optionally followed by `,d>>?`) into steps in
/// textual order plus the query variable, if present.
pub fn parse_premises(text: &str) -> Result<(Vec<Step<char>>, Option<char>)> {
    let mut steps = Vec::new();
    let mut query = None;
    for (i, part) in text.split(',').enumerate() {
        if let Some(q) = part.strip_suffix(">>?") {
            let mut cs = q.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) if c.is_ascii_lowercase() => query = Some(c),
                _ => return Err(Error::Structure(format!("bad query `{part}`"))),
            }
            continue;
        }
        if query.is_some() {
            return Err(Error::Structure("premise after query".into()));
        }
        steps.push(parse_step(part).map_err(|e| Error::Structure(format!("premise {}: {e}", i + 1)))?);
    }
    Ok((steps, query))
}

fn parse_step(s: &str) -> std::result::Result<Step<char>, String> {
    let (target, expr) = s.split_once('=').ok_or_else(|| format!("missing '=' in `{s}`"))?;
    let mut tc = target.chars();
    let target = match (tc.next(), tc.next()) {
        (Some(c), None) if c.is_ascii_lowercase() => c,
        _ => return Err(format!("bad target `{target}`")),
    };
    let pos = expr[1..].find(['+', '-']).map(|p| p + 1).ok_or_else(|| format!("missing operator in `{expr}`"))?;
    let op = if &expr[pos..pos + 1] == "+" { BinOp::Plus } else { BinOp::Minus };
    let lhs = parse_operand(&expr[..pos])?;
    let rhs = parse_operand(&expr[pos + 1..])?;
    Ok(Step { target, lhs, op, rhs })
}

fn parse_operand(s: &str) -> std::result::Result<Operand<char>, String> {
    let mut cs = s.chars();
    match (cs.next(), cs.next()) {
        (Some(c), None) if c.is_ascii_lowercase() => Ok(Operand::Variable(c)),
        _ => {
            let n: u8 = s.parse().map_err(|_| format!("bad operand `{s}`"))?;
            if n >= MODULUS {
                return Err(format!("operand {n} out of range"));
            }
            Ok(Operand::Number(n))
        }
    }
}

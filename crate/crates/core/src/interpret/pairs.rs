// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::{Operand, Problem, Step, Template, MODULUS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// One number replaced by a different value.
    OperandChange,
    /// One `+` and `-` swapped.
    OperatorFlip,
    /// A step-`step` number changes and the number of `tracked_step` is
    /// re-solved so the tracked variable keeps its value.
    ResultFixed,
    /// As `ResultFixed`, but the tracked variable is forced to change.
    ResultVaried,
}

impl CorruptionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::OperandChange => "operand_change",
            CorruptionKind::OperatorFlip => "operator_flip",
            CorruptionKind::ResultFixed => "result_fixed",
            CorruptionKind::ResultVaried => "result_varied",
        }
    }
}

/// Which operand of a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Lhs,
    Rhs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Chain index of the step that is changed.
    pub step: usize,
    /// Operand to change; `None` picks the step's last numeric operand.
    pub slot: Option<Slot>,
    /// Chain index of the variable to hold fixed or vary (result kinds only).
    pub tracked_step: Option<usize>,
}

impl CorruptionSpec {
    /// Change a number of the first step.
    pub fn first_operand() -> Self {
        CorruptionSpec { kind: CorruptionKind::OperandChange, step: 0, slot: None, tracked_step: None }
    }

    pub fn first_operator() -> Self {
        CorruptionSpec { kind: CorruptionKind::OperatorFlip, step: 0, slot: None, tracked_step: None }
    }

    pub fn result(kind: CorruptionKind, tracked_step: usize) -> Self {
        CorruptionSpec { kind, step: 0, slot: None, tracked_step: Some(tracked_step) }
    }
}

/// Operator and variable placement of a chained step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperandCombo {
    NumPlusVar,
    VarPlusNum,
    VarMinusNum,
    NumMinusVar,
}

impl OperandCombo {
    pub const ALL: [OperandCombo; 4] =
        [OperandCombo::NumPlusVar, OperandCombo::VarPlusNum, OperandCombo::VarMinusNum, OperandCombo::NumMinusVar];

    pub fn as_str(self) -> &'static str {
        match self {
            OperandCombo::NumPlusVar => "num_plus_var",
            OperandCombo::VarPlusNum => "var_plus_num",
            OperandCombo::VarMinusNum => "var_minus_num",
            OperandCombo::NumMinusVar => "num_minus_var",
        }
    }

    /// `None` for a step without a variable operand.
    pub fn of<V>(step: &Step<V>) -> Option<Self> {
        use crate::taskgen::BinOp::{Minus, Plus};
        match (step.lhs.is_variable(), step.op, step.rhs.is_variable()) {
            (false, Plus, true) => Some(OperandCombo::NumPlusVar),
            (true, Plus, false) => Some(OperandCombo::VarPlusNum),
            (true, Minus, false) => Some(OperandCombo::VarMinusNum),
            (false, Minus, true) => Some(OperandCombo::NumMinusVar),
            _ => None,
        }
    }
}

impl std::str::FromStr for OperandCombo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        OperandCombo::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown operand combination `{s}`")))
    }
}

/// Problems whose chain step `step` has the given combination.
pub fn filter_combo(problems: &[Problem], step: usize, combo: OperandCombo) -> Vec<Problem> {
    problems
        .iter()
        .filter(|p| p.template.steps().get(step).and_then(OperandCombo::of) == Some(combo))
        .cloned()
        .collect()
}

/// Clean and corrupted problems with their answers `r` and `r'`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub clean: Problem,
    pub corrupted: Problem,
    pub r: u8,
    pub r_prime: u8,
}

fn operand_mut(step: &mut Step<usize>, slot: Slot) -> &mut Operand<usize> {
    match slot {
        Slot::Lhs => &mut step.lhs,
        Slot::Rhs => &mut step.rhs,
    }
}

fn numeric_slot(step: &Step<usize>, slot: Option<Slot>, idx: usize) -> Result<Slot> {
    let pick = match slot {
        Some(s) => s,
        None if step.rhs.number().is_some() => Slot::Rhs,
        None => Slot::Lhs,
    };
    let op = match pick {
        Slot::Lhs => step.lhs,
        Slot::Rhs => step.rhs,
    };
    if op.number().is_none() {
        return Err(Error::Inapplicable(format!("step {idx} has no number in the {pick:?} slot")));
    }
    Ok(pick)
}

fn different_value<R: Rng + ?Sized>(rng: &mut R, old: u8) -> u8 {
    let v = rng.random_range(0..MODULUS - 1);
    if v >= old {
        v + 1
    } else {
        v
    }
}

/// The unique number for `slot` of `steps[j]` that makes that step evaluate
/// to `want`, found by trying all residues.
pub fn compensate(steps: &[Step<usize>], j: usize, slot: Slot, want: u8) -> Result<u8> {
    let mut hits = (0..MODULUS).filter(|&n| {
        let mut s = steps.to_vec();
        *operand_mut(&mut s[j], slot) = Operand::Number(n);
        Template::new(s).map(|t| t.values()[j] == want).unwrap_or(false)
    });
    let first = hits.next().ok_or_else(|| Error::Inapplicable(format!("no compensating value for step {j}")))?;
    debug_assert!(hits.next().is_none(), "compensation must be unique");
    Ok(first)
}

/// Build a clean/corrupted pair differing only at the tokens named by `spec`.
pub fn make_pair<R: Rng + ?Sized>(problem: &Problem, spec: &CorruptionSpec, rng: &mut R) -> Result<PatchPair> {
    let n = problem.n_steps();
    if spec.step >= n {
        return Err(Error::Inapplicable(format!("step {} of a {n}-step problem", spec.step)));
    }
    let mut steps = problem.template.steps().to_vec();
    match spec.kind {
        CorruptionKind::OperandChange => {
            let slot = numeric_slot(&steps[spec.step], spec.slot, spec.step)?;
            let op = operand_mut(&mut steps[spec.step], slot);
            let old = op.number().expect("numeric slot");
            *op = Operand::Number(different_value(rng, old));
        }
        CorruptionKind::OperatorFlip => {
            steps[spec.step].op = steps[spec.step].op.flipped();
        }
        CorruptionKind::ResultFixed | CorruptionKind::ResultVaried => {
            let j = spec.tracked_step.ok_or_else(|| Error::Inapplicable("result pair needs a tracked step".into()))?;
            if j <= spec.step || j >= n {
                return Err(Error::Inapplicable(format!(
                    "tracked step {j} must follow changed step {} within {n} steps",
                    spec.step
                )));
            }
            let slot = numeric_slot(&steps[spec.step], spec.slot, spec.step)?;
            let jslot = numeric_slot(&steps[j], None, j)?;
            let tracked = problem.template.values()[j];
            let op = operand_mut(&mut steps[spec.step], slot);
            *op = Operand::Number(different_value(rng, op.number().expect("numeric slot")));
            let fix = compensate(&steps, j, jslot, tracked)?;
            let value = if spec.kind == CorruptionKind::ResultFixed {
                fix
            } else {
                // Any other number gives a different tracked value.
                different_value(rng, fix)
            };
            *operand_mut(&mut steps[j], jslot) = Operand::Number(value);
        }
    }
    let template = Template::new(steps)?;
    let corrupted = Problem { template, ..problem.clone() };
    let (r, r_prime) = (problem.answer(), corrupted.answer());
    Ok(PatchPair { clean: problem.clone(), corrupted, r, r_prime })
}

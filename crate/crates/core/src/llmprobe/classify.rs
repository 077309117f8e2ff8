// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::prompt::PromptVariant;

static ASSIGN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Za-z])\s*=\s*(-?\d+)").expect("valid"));
static ANY_ASSIGN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Za-z])\s*=").expect("valid"));
static ARITH: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+|\b[A-Za-z]\b)\s*[-+*/×÷−]\s*(\d+|\b[A-Za-z]\b)").expect("valid"));
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+").expect("valid"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classified {
    pub answer: Option<i64>,
    pub cot_flag: bool,
}

/// Parse `<letter> = <int>` for the query letter (first occurrence, case
/// and whitespace tolerant) and flag chain-of-thought output: an
/// assignment to any other letter, an arithmetic expression, or more than
/// two non-empty lines.
pub fn parse_and_classify(response: &str, query_letter: char) -> Classified {
    let q = query_letter.to_ascii_lowercase();
    let answer = ASSIGN
        .captures_iter(response)
        .find(|c| c[1].chars().next().is_some_and(|l| l.to_ascii_lowercase() == q))
        .and_then(|c| c[2].parse().ok());
    let other_assignment =
        ANY_ASSIGN.captures_iter(response).any(|c| c[1].chars().next().is_some_and(|l| l.to_ascii_lowercase() != q));
    let lines = response.lines().filter(|l| !l.trim().is_empty()).count();
    let cot_flag = other_assignment || ARITH.is_match(response) || lines > 2;
    Classified { answer, cot_flag }
}

/// [`parse_and_classify`], plus for word problems a reply with exactly
/// one integer and no arithmetic counts as that integer.
pub fn classify_for(response: &str, query_letter: char, variant: PromptVariant) -> Classified {
    let mut c = parse_and_classify(response, query_letter);
    if c.answer.is_none() && !c.cot_flag && variant == PromptVariant::NaturalLanguage {
        let ints: Vec<&str> = INTEGER.find_iter(response).map(|m| m.as_str()).collect();
        if let [one] = ints.as_slice() {
            c.answer = one.parse().ok();
        }
    }
    c
}

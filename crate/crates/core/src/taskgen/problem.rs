// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instantiated problems: a template with concrete letters and a premise order.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::chain::{parse_premises, Step, Template};
use super::vocab::TokenSeq;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    Forward,
    Reverse,
    Random,
    FixedShuffled,
}

impl OrderMode {
    pub const ALL: [OrderMode; 4] =
        [OrderMode::Forward, OrderMode::Reverse, OrderMode::Random, OrderMode::FixedShuffled];

    pub fn as_str(self) -> &'static str {
        match self {
            OrderMode::Forward => "forward",
            OrderMode::Reverse => "reverse",
            OrderMode::Random => "random",
            OrderMode::FixedShuffled => "fixed_shuffled",
        }
    }

    /// Label for an explicit permutation: identity is forward, full
    /// reversal is reverse, anything else random.
    pub fn classify(order: &[usize]) -> OrderMode {
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            OrderMode::Forward
        } else if order.iter().rev().enumerate().all(|(i, &o)| i == o) {
            OrderMode::Reverse
        } else {
            OrderMode::Random
        }
    }
}

impl fmt::Display for OrderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OrderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(OrderMode::Forward),
            "reverse" => Ok(OrderMode::Reverse),
            "random" | "shuffled" => Ok(OrderMode::Random),
            "fixed_shuffled" => Ok(OrderMode::FixedShuffled),
            _ => Err(Error::Config(format!("unknown order mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestId,
    TestOod,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test_id" => Ok(Split::TestId),
            "test_ood" => Ok(Split::TestOod),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// A template instantiated with letters and serialized in some premise order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Problem {
    pub template: Template,
    /// `letters[i]` names canonical variable `i`; injective.
    pub letters: Vec<char>,
    /// `order[k]` is the chain index of the premise printed at position `k`.
    pub order: Vec<usize>,
    pub order_mode: OrderMode,
    pub split: Split,
}

impl Problem {
    pub fn new(template: Template, letters: Vec<char>, split: Split) -> Result<Self> {
        if letters.len() != template.n_steps() {
            return Err(Error::Contract(format!(
                "{} letters for a {}-step template",
                letters.len(),
                template.n_steps()
            )));
        }
        let mut seen = [false; 26];
        for &c in &letters {
            if !c.is_ascii_lowercase() || std::mem::replace(&mut seen[(c as u8 - b'a') as usize], true) {
                return Err(Error::Contract(format!("letter assignment {letters:?} is not injective over a-z")));
            }
        }
        let order = (0..template.n_steps()).collect();
        Ok(Problem { template, letters, order, order_mode: OrderMode::Forward, split })
    }

    pub fn n_steps(&self) -> usize {
        self.template.n_steps()
    }

    pub fn answer(&self) -> u8 {
        self.template.answer()
    }

    pub fn n_vas(&self) -> usize {
        self.template.n_vas()
    }

    pub fn query_letter(&self) -> char {
        *self.letters.last().expect("non-empty")
    }

    /// Steps in chain order with letters substituted.
    pub fn named_steps(&self) -> Vec<Step<char>> {
        self.template.steps().iter().map(|s| s.map_vars(|&v| self.letters[v])).collect()
    }

    /// Steps in presentation order.
    pub fn presented_steps(&self) -> Vec<Step<char>> {
        let named = self.named_steps();
        self.order.iter().map(|&i| named[i]).collect()
    }

    /// `a=4+6,d=a+5,d>>?`
    pub fn text(&self) -> String {
        let mut s = String::new();
        for step in self.presented_steps() {
            s.push_str(&step.to_string());
            s.push(',');
        }
        s.push(self.query_letter());
        s.push_str(">>?");
        s
    }

    pub fn token_seq(&self) -> Result<TokenSeq> {
        TokenSeq::from_text(&self.text(), self.answer())
    }

    /// Re-create a problem from its text and the premise order.
    pub fn from_text(text: &str, order: &[usize], order_mode: OrderMode, split: Split) -> Result<Self> {
        let (presented, query) = parse_premises(text)?;
        if order.len() != presented.len() {
            return Err(Error::Structure(format!(
                "order has {} entries for {} premises",
                order.len(),
                presented.len()
            )));
        }
        let mut chain: Vec<Option<Step<char>>> = vec![None; presented.len()];
        for (k, &i) in order.iter().enumerate() {
            let slot = chain.get_mut(i).ok_or_else(|| Error::Structure(format!("order index {i} out of range")))?;
            if slot.replace(presented[k]).is_some() {
                return Err(Error::Structure("order is not a permutation".into()));
            }
        }
        let chain: Vec<Step<char>> = chain.into_iter().map(|s| s.expect("filled")).collect();
        let (template, letters) = Template::from_named(&chain)?;
        if query.is_some_and(|q| Some(&q) != letters.last()) {
            return Err(Error::Structure("query does not ask for the final variable".into()));
        }
        let mut p = Problem::new(template, letters, split)?;
        p.order = order.to_vec();
        p.order_mode = order_mode;
        Ok(p)
    }

    pub fn with_order(&self, order: Vec<usize>, mode: OrderMode) -> Problem {
        Problem { order, order_mode: mode, ..self.clone() }
    }
}

/// Number of steps whose variable is the subtrahend.
pub fn count_vas(p: &Problem) -> usize {
    p.n_vas()
}

/// Re-serialize `p` under `mode`. `Random` draws a uniform permutation from `rng`.
pub fn order_premises<R: Rng + ?Sized>(p: &Problem, mode: OrderMode, rng: &mut R) -> Result<Problem> {
    let n = p.n_steps();
    let order: Vec<usize> = match mode {
        OrderMode::Forward => (0..n).collect(),
        OrderMode::Reverse => (0..n).rev().collect(),
        OrderMode::Random => {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(rng);
            o
        }
        OrderMode::FixedShuffled if n == 3 => vec![2, 0, 1],
        OrderMode::FixedShuffled => {
            return Err(Error::UnsupportedMode(format!("fixed_shuffled needs a 3-step problem, got {n} steps")))
        }
    };
    Ok(p.with_order(order, mode))
}

/// Sample `n` distinct letters uniformly from a-z.
pub fn sample_letters<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<char> {
    rand::seq::index::sample(rng, 26, n).into_iter().map(|i| (b'a' + i as u8) as char).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn problem(text: &str) -> Problem {
        let n = parse_premises(text).unwrap().0.len();
        Problem::from_text(text, &(0..n).collect::<Vec<_>>(), OrderMode::Forward, Split::Train).unwrap()
    }

    fn one_based(p: &Problem) -> Vec<usize> {
        p.order.iter().map(|i| i + 1).collect()
    }

    #[test]
    fn order_modes() {
        let p = problem("a=4+14,c=a-12,s=6-c,s>>?");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(one_based(&order_premises(&p, OrderMode::Reverse, &mut rng).unwrap()), [3, 2, 1]);
        let fs = order_premises(&p, OrderMode::FixedShuffled, &mut rng).unwrap();
        assert_eq!(one_based(&fs), [3, 1, 2]);
        assert_eq!(fs.text(), "s=6-c,a=4+14,c=a-12,s>>?");
        let one = problem("q=5+5,q>>?");
        for mode in [OrderMode::Forward, OrderMode::Reverse, OrderMode::Random] {
            assert_eq!(one_based(&order_premises(&one, mode, &mut rng).unwrap()), [1]);
        }
        assert!(matches!(order_premises(&one, OrderMode::FixedShuffled, &mut rng), Err(Error::UnsupportedMode(_))));
    }

    #[test]
    fn text_round_trip_through_order() {
        let p = problem("a=4+6,d=a+5,c=1+d,c>>?");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shuffled = order_premises(&p, OrderMode::Random, &mut rng).unwrap();
        assert!(shuffled.text().ends_with(",c>>?"));
        let back = Problem::from_text(&shuffled.text(), &shuffled.order, OrderMode::Random, Split::Train).unwrap();
        assert_eq!(back.template, p.template);
        assert_eq!(back.letters, p.letters);
        assert_eq!(back.answer(), 16);
    }

    #[test]
    fn letters_are_injective() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let l = sample_letters(&mut rng, 7);
            let mut s = l.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 7);
        }
    }
}

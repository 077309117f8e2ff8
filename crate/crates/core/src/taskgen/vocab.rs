// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixed single-token vocabulary.
//!
//! Every number `0..=22` is one token, so a premise such as `a=4+6,`
//! always occupies exactly six positions and the query `a>>?` three.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::chain::MODULUS;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const N_NUMBERS: usize = MODULUS as usize;
pub const LETTER_BASE: TokenId = N_NUMBERS as TokenId;
pub const EQ: TokenId = LETTER_BASE + 26;
pub const PLUS: TokenId = EQ + 1;
pub const MINUS: TokenId = EQ + 2;
pub const COMMA: TokenId = EQ + 3;
pub const ARROW: TokenId = EQ + 4;
pub const QMARK: TokenId = EQ + 5;
pub const BOS: TokenId = EQ + 6;
pub const PAD: TokenId = EQ + 7;
pub const VOCAB_SIZE: usize = PAD as usize + 1;

/// Tokens per premise (`a=4+6,`).
pub const STEP_TOKENS: usize = 6;
/// Tokens in the query (`a>>?`), excluding the answer.
pub const QUERY_TOKENS: usize = 3;

/// Symbol table for the vocabulary; ids are implicit positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut symbols: Vec<String> = (0..N_NUMBERS).map(|n| n.to_string()).collect();
        symbols.extend(('a'..='z').map(|c| c.to_string()));
        for s in ["=", "+", "-", ",", ">>", "?", "<bos>", "<pad>"] {
            symbols.push(s.to_string());
        }
        debug_assert_eq!(symbols.len(), VOCAB_SIZE);
        Vocab { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Hex SHA-256 over the ordered symbol list; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.symbols {
            h.update(s.as_bytes());
            h.update([0u8]);
        }
        hex_digest(h)
    }

    pub fn manifest(&self) -> VocabManifest {
        VocabManifest {
            schema: 1,
            fingerprint: self.fingerprint(),
            tokens: self
                .symbols
                .iter()
                .enumerate()
                .map(|(id, s)| VocabEntry { id: id as TokenId, symbol: s.clone() })
                .collect(),
        }
    }

    pub fn from_manifest(m: &VocabManifest) -> Result<Self> {
        let mut symbols = vec![String::new(); m.tokens.len()];
        for e in &m.tokens {
            let slot = symbols
                .get_mut(e.id as usize)
                .ok_or_else(|| Error::Tokenize(format!("manifest id {} out of range", e.id)))?;
            *slot = e.symbol.clone();
        }
        Ok(Vocab { symbols })
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: TokenId,
    pub symbol: String,
}

/// On-disk listing of token id <-> symbol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabManifest {
    pub schema: u32,
    pub fingerprint: String,
    pub tokens: Vec<VocabEntry>,
}

pub fn letter_token(c: char) -> Option<TokenId> {
    c.is_ascii_lowercase().then(|| LETTER_BASE + (c as u8 - b'a') as TokenId)
}

pub fn number_token(n: u8) -> Option<TokenId> {
    (n < MODULUS).then_some(n as TokenId)
}

/// Number value of a token, if it is one.
pub fn token_number(t: TokenId) -> Option<u8> {
    (t < LETTER_BASE).then_some(t as u8)
}

/// Split a problem string into token ids (no BOS, no answer).
pub fn tokenize_text(text: &str) -> Result<Vec<TokenId>> {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(text.len());
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let lit = &text[start..i];
                let n: u32 = lit.parse().map_err(|_| Error::Tokenize(format!("bad number `{lit}`")))?;
                if n >= MODULUS as u32 || (lit.len() > 1 && lit.starts_with('0')) {
                    return Err(Error::Tokenize(format!("number `{lit}` is not a vocabulary token")));
                }
                out.push(n);
                continue;
            }
            b'a'..=b'z' => out.push(LETTER_BASE + (b - b'a') as TokenId),
            b'=' => out.push(EQ),
            b'+' => out.push(PLUS),
            b'-' => out.push(MINUS),
            b',' => out.push(COMMA),
            b'?' => out.push(QMARK),
            b'>' if bytes.get(i + 1) == Some(&b'>') => {
                out.push(ARROW);
                i += 1;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(Error::Tokenize(format!("symbol `{ch}` at byte {i} is out of vocabulary")));
            }
        }
        i += 1;
    }
    Ok(out)
}

/// Concatenate symbols for content tokens; BOS and PAD are dropped.
pub fn detokenize_ids(ids: &[TokenId]) -> Result<String> {
    let vocab = Vocab::new();
    let mut s = String::new();
    for &id in ids {
        if id == BOS || id == PAD {
            continue;
        }
        s.push_str(vocab.symbol(id).ok_or_else(|| Error::Tokenize(format!("token id {id} out of range")))?);
    }
    Ok(s)
}

/// Model input for one problem: `BOS text answer`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    /// Index of the answer token; the model predicts it from `answer_pos - 1`.
    pub answer_pos: usize,
}

impl TokenSeq {
    /// Tokenize a problem string and append the answer token.
    pub fn from_text(text: &str, answer: u8) -> Result<Self> {
        let mut tokens = vec![BOS];
        tokens.extend(tokenize_text(text)?);
        tokens.push(number_token(answer).ok_or_else(|| Error::Tokenize(format!("answer {answer} out of range")))?);
        let answer_pos = tokens.len() - 1;
        Ok(TokenSeq { tokens, answer_pos })
    }

    /// Position whose logits predict the answer (the `?` token).
    pub fn query_pos(&self) -> usize {
        self.answer_pos - 1
    }

    /// Input without the answer token.
    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.answer_pos]
    }

    pub fn answer(&self) -> TokenId {
        self.tokens[self.answer_pos]
    }
}

/// Problem text back from a token sequence (drops BOS and the answer).
pub fn detokenize(t: &TokenSeq) -> Result<String> {
    detokenize_ids(&t.tokens[..t.answer_pos])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_layout() {
        let v = Vocab::new();
        assert_eq!(v.len(), 57);
        assert_eq!(v.symbol(0), Some("0"));
        assert_eq!(v.symbol(22), Some("22"));
        assert_eq!(v.symbol(LETTER_BASE), Some("a"));
        assert_eq!(v.symbol(ARROW), Some(">>"));
        let m = v.manifest();
        assert_eq!(Vocab::from_manifest(&m).unwrap(), v);
    }

    #[test]
    fn step_is_six_tokens() {
        let ids = tokenize_text("a=4+6,").unwrap();
        let syms: Vec<_> = ids.iter().map(|&i| Vocab::new().symbol(i).unwrap().to_string()).collect();
        assert_eq!(syms, ["a", "=", "4", "+", "6", ","]);
        let q = tokenize_text("c>>?").unwrap();
        assert_eq!(q, vec![LETTER_BASE + 2, ARROW, QMARK]);
        assert_eq!(tokenize_text("z=22-21,").unwrap().len(), STEP_TOKENS);
    }

    #[test]
    fn out_of_vocabulary() {
        assert!(matches!(tokenize_text("a=4*6"), Err(Error::Tokenize(_))));
        assert!(tokenize_text("a=23+1").is_err());
        assert!(tokenize_text("a=04+1").is_err());
        assert!(tokenize_text("a>b").is_err());
        assert!(tokenize_text("A=1+2").is_err());
    }

    #[test]
    fn token_seq_layout() {
        let t = TokenSeq::from_text("a=4+6,a>>?", 10).unwrap();
        assert_eq!(t.tokens.len(), 1 + 6 + 3 + 1);
        assert_eq!(t.answer(), 10);
        assert_eq!(t.tokens[t.query_pos()], QMARK);
        assert_eq!(detokenize(&t).unwrap(), "a=4+6,a>>?");
    }
}

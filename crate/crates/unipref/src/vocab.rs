//! Token space and token sequences shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered set of token symbols with a designated end-of-sequence token.
///
/// Symbols are unique, the vocabulary has at least two entries, and
/// `eos_index` is a valid index. Sequences are exact length; there is no pad
/// token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr")]
pub struct Vocabulary {
    symbols: Vec<String>,
    eos_index: usize,
}

#[derive(Deserialize)]
struct VocabularyRepr {
    symbols: Vec<String>,
    eos_index: usize,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(repr: VocabularyRepr) -> Result<Self> {
        Vocabulary::new(repr.symbols, repr.eos_index)
    }
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>, eos_index: usize) -> Result<Self> {
        if symbols.len() < 2 {
            return Err(Error::Validation(format!(
                "vocabulary needs at least 2 symbols, got {}",
                symbols.len()
            )));
        }
        if eos_index >= symbols.len() {
            return Err(Error::Validation(format!(
                "eos_index {} out of range for vocabulary of size {}",
                eos_index,
                symbols.len()
            )));
        }
        for (i, a) in symbols.iter().enumerate() {
            for b in symbols.iter().skip(i + 1) {
                if a == b {
                    return Err(Error::Validation(format!("duplicate symbol `{a}`")));
                }
            }
        }
        Ok(Vocabulary { symbols, eos_index })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn eos_index(&self) -> usize {
        self.eos_index
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }
}

/// A list of token indices. At most one end-of-sequence token, and only as
/// the final token; validity against a concrete vocabulary is checked with
/// [`Sequence::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence {
    tokens: Vec<usize>,
}

impl Sequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Sequence { tokens }
    }

    pub fn empty() -> Self {
        Sequence { tokens: Vec::new() }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, token: usize) {
        self.tokens.push(token);
    }

    /// Number of tokens excluding a trailing end-of-sequence token.
    ///
    /// This is the "response length" used by length constraints and the
    /// length-distribution metric.
    pub fn content_len(&self, vocab: &Vocabulary) -> usize {
        match self.tokens.last() {
            Some(&t) if t == vocab.eos_index() => self.tokens.len() - 1,
            _ => self.tokens.len(),
        }
    }

    /// Token indices excluding a trailing end-of-sequence token.
    pub fn content_tokens<'a>(&'a self, vocab: &Vocabulary) -> &'a [usize] {
        &self.tokens[..self.content_len(vocab)]
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for (pos, &t) in self.tokens.iter().enumerate() {
            if t >= vocab.size() {
                return Err(Error::Validation(format!(
                    "token index {} at position {} exceeds vocabulary size {}",
                    t,
                    pos,
                    vocab.size()
                )));
            }
            if t == vocab.eos_index() && pos + 1 != self.tokens.len() {
                return Err(Error::Validation(format!(
                    "eos token at non-final position {pos}"
                )));
            }
        }
        Ok(())
    }
}

impl From<Vec<usize>> for Sequence {
    fn from(tokens: Vec<usize>) -> Self {
        Sequence::new(tokens)
    }
}

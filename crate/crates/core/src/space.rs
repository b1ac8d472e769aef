//! Token vocabularies, sequences and the enumerable response space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper bound on `vocab_size ^ response_len` for exhaustive enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VocabSpec {
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub response_len: usize,
}

impl VocabSpec {
    pub fn new(vocab_size: usize, prompt_len: usize, response_len: usize) -> Result<Self> {
        let spec = VocabSpec {
            vocab_size,
            prompt_len,
            response_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be >= 2"));
        }
        if self.prompt_len == 0 || self.response_len == 0 {
            return Err(Error::invalid("prompt_len and response_len must be >= 1"));
        }
        if self.vocab_size >= u32::MAX as usize {
            return Err(Error::invalid("vocab_size must leave room for the pad id"));
        }
        if self.response_space_size().is_none() {
            return Err(Error::UnsupportedScale(format!(
                "{}^{} does not fit in 64 bits",
                self.vocab_size, self.response_len
            )));
        }
        Ok(())
    }

    /// `|V|^L_y`, or `None` on overflow.
    pub fn response_space_size(&self) -> Option<u64> {
        (self.vocab_size as u64).checked_pow(u32::try_from(self.response_len).ok()?)
    }

    /// Reserved id meaning "no token here"; never produced by a policy.
    pub fn pad_token(&self) -> u32 {
        self.vocab_size as u32
    }

    /// Number of context slots the neural policy sees: the prompt plus every
    /// response position except the last.
    pub fn context_slots(&self) -> usize {
        self.prompt_len + self.response_len - 1
    }

    pub fn check_prompt(&self, x: &Sequence) -> Result<()> {
        self.check_tokens(x, self.prompt_len, "prompt")
    }

    pub fn check_response(&self, y: &Sequence) -> Result<()> {
        self.check_tokens(y, self.response_len, "response")
    }

    fn check_tokens(&self, s: &Sequence, len: usize, what: &str) -> Result<()> {
        if s.len() != len {
            return Err(Error::invalid(format!(
                "{what} has length {}, expected {len}",
                s.len()
            )));
        }
        if let Some(t) = s.0.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "{what} token {t} out of range [0, {})",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// A prompt or response as a list of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence(pub Vec<u32>);

impl Sequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Sequence(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for Sequence {
    fn from(v: Vec<u32>) -> Self {
        Sequence(v)
    }
}

/// Bijection between responses and `0..|V|^L_y`, first token most significant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseSpace {
    vocab: VocabSpec,
    size: usize,
}

impl ResponseSpace {
    pub fn new(vocab: VocabSpec, cap: u64) -> Result<Self> {
        vocab.validate()?;
        let size = vocab
            .response_space_size()
            .ok_or_else(|| Error::UnsupportedScale("response space overflows u64".into()))?;
        if size > cap {
            return Err(Error::UnsupportedScale(format!(
                "response space has {size} elements, enumeration cap is {cap}"
            )));
        }
        Ok(ResponseSpace {
            vocab,
            size: size as usize,
        })
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn decode(&self, mut index: usize) -> Sequence {
        let v = self.vocab.vocab_size;
        let mut tokens = vec![0u32; self.vocab.response_len];
        for slot in tokens.iter_mut().rev() {
            *slot = (index % v) as u32;
            index /= v;
        }
        Sequence(tokens)
    }

    pub fn encode(&self, y: &Sequence) -> Result<usize> {
        self.vocab.check_response(y)?;
        Ok(self.encode_unchecked(y.tokens()))
    }

    pub(crate) fn encode_unchecked(&self, tokens: &[u32]) -> usize {
        let v = self.vocab.vocab_size;
        tokens.iter().fold(0usize, |acc, &t| acc * v + t as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = Sequence> + '_ {
        (0..self.size).map(move |i| self.decode(i))
    }
}

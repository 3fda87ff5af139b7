use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
/// Number of special tokens, which take the lowest ids.
pub const SPECIALS: usize = 3;

/// Closed character vocabulary; character `i` has id `SPECIALS + i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(invalid("Vocab", alloc::format!("duplicate character {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(invalid("Vocab", "empty character set"));
        }
        Ok(Self { chars })
    }

    /// Sorted set of characters occurring in `texts`.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut chars: Vec<char> = texts.into_iter().flat_map(str::chars).collect();
        chars.sort_unstable();
        chars.dedup();
        Self::new(chars)
    }

    /// Total size including specials.
    pub fn len(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Result<usize> {
        self.chars
            .iter()
            .position(|&x| x == c)
            .map(|i| i + SPECIALS)
            .ok_or(Error::UnknownChar(c))
    }

    pub fn char(&self, id: usize) -> Option<char> {
        id.checked_sub(SPECIALS).and_then(|i| self.chars.get(i).copied())
    }

    pub fn contains_all(&self, text: &str) -> Result<()> {
        text.chars().try_for_each(|c| self.id(c).map(|_| ()))
    }

    /// `SOS, ids…, EOS`, padded with `PAD` to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let n = text.chars().count();
        if n + 2 > max_len {
            return Err(Error::TextTooLong { len: n, max: max_len.saturating_sub(2) });
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(SOS);
        for c in text.chars() {
            ids.push(self.id(c)?);
        }
        ids.push(EOS);
        ids.resize(max_len, PAD);
        Ok(ids)
    }

    /// Characters of `ids` with specials dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.char(i)).collect()
    }
}

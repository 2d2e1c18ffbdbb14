//! Symbol table: alphabet characters plus the end, padding, and start
//! markers used by the decoding protocols.

use crate::error::{Error, Result};

/// Ordered symbol set. Class indices are contiguous: alphabet characters
/// first, then ⟨eos⟩ and ⟨pad⟩ (both predictable outputs), then ⟨sos⟩
/// which exists only as a decoder input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Vocabulary {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::Config("vocabulary needs at least one character".into()));
        }
        let mut seen = chars.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != chars.len() {
            return Err(Error::Config("vocabulary characters must be unique".into()));
        }
        Ok(Vocabulary { chars })
    }

    /// The ten-glyph toy alphabet bundled with the synthetic corpus.
    pub fn toy() -> Self {
        Vocabulary { chars: ('a'..='j').collect() }
    }

    pub fn alphabet_len(&self) -> usize {
        self.chars.len()
    }

    pub fn eos(&self) -> usize {
        self.chars.len()
    }

    pub fn pad(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn sos(&self) -> usize {
        self.chars.len() + 2
    }

    /// Output class count: alphabet + ⟨eos⟩ + ⟨pad⟩.
    pub fn out_classes(&self) -> usize {
        self.chars.len() + 2
    }

    /// Decoder input symbol count: output classes + ⟨sos⟩.
    pub fn in_classes(&self) -> usize {
        self.chars.len() + 3
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        self.chars.iter().position(|&c| c == ch)
    }

    pub fn char_at(&self, idx: usize) -> Option<char> {
        self.chars.get(idx).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|ch| {
                self.index_of(ch)
                    .ok_or_else(|| Error::Usage(format!("character {ch:?} not in vocabulary")))
            })
            .collect()
    }

    /// Render class indices back to text, stopping at the first ⟨eos⟩ and
    /// skipping ⟨pad⟩.
    pub fn decode(&self, indices: &[usize]) -> String {
        let mut out = String::new();
        for &idx in indices {
            if idx == self.eos() {
                break;
            }
            if let Some(ch) = self.char_at(idx) {
                out.push(ch);
            }
        }
        out
    }
}

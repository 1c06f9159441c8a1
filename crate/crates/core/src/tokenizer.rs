//! Character-level vocabulary shared by the LM and the CTC branch.
//!
//! Ids `0..4` are the specials (BOS, EOS, PAD, UNK); characters follow in
//! codepoint order. The CTC side adds one extra class, the blank, with id
//! `lm_size()`.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: BTreeMap<char, u32>,
}

impl Vocab {
    /// Builds a vocabulary from every character in `corpus`.
    pub fn build<I, S>(corpus: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = BTreeSet::new();
        let mut any = false;
        for line in corpus {
            any = true;
            seen.extend(line.as_ref().chars());
        }
        if !any || seen.is_empty() {
            return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
        }
        Ok(Self::from_chars(seen.into_iter().collect()))
    }

    /// Rebuilds a vocabulary from its characters in id order.
    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i as u32 + NUM_SPECIALS)).collect();
        Vocab { chars, index }
    }

    /// Characters in id order (what checkpoints persist).
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn char_string(&self) -> String {
        self.chars.iter().collect()
    }

    /// LM vocabulary size, specials included.
    pub fn lm_size(&self) -> usize {
        self.chars.len() + NUM_SPECIALS as usize
    }

    /// CTC class count: LM vocabulary plus blank.
    pub fn ctc_size(&self) -> usize {
        self.lm_size() + 1
    }

    pub fn blank(&self) -> u32 {
        self.lm_size() as u32
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.id(c).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            if id >= self.lm_size() as u32 {
                return Err(Error::InvalidId(id));
            }
            if id >= NUM_SPECIALS {
                s.push(self.chars[(id - NUM_SPECIALS) as usize]);
            }
        }
        Ok(s)
    }
}

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Decoder-specific tokens. They occupy ids at and after `len()`, so they
/// never collide with a symbol id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Special {
    /// CTC blank, id `len()`.
    Blank,
    /// Attention end-of-word `[EOW]`, id `len()`.
    EndOfWord,
    /// Attention start token `[S]`, id `len() + 1`.
    Start,
}

/// Ordered symbol inventory with a bijective symbol/id map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Charset {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        if symbols.is_empty() {
            return Err(Error::Config("charset is empty".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if c == '\t' || c == '\n' || c == '\r' {
                return Err(Error::Config(format!("charset may not contain control character {c:?}")));
            }
            if index.insert(c, i).is_some() {
                return Err(Error::Config(format!("duplicate charset symbol {c:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// The 95 printable ASCII characters: 52 letters, 10 digits and 33
    /// specials (space included).
    pub fn printable_ascii() -> Self {
        Self::new((0x20u8..=0x7e).map(char::from)).expect("ascii charset is valid")
    }

    /// Digits, lowercase and uppercase letters.
    pub fn alphanumeric() -> Self {
        Self::new(('0'..='9').chain('a'..='z').chain('A'..='Z')).expect("alphanumeric charset is valid")
    }

    /// Reads a charset file: every character of the file, minus line breaks.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(text.chars().filter(|c| *c != '\n' && *c != '\r'))
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        self.symbols.get(id).copied()
    }

    pub fn special_id(&self, special: Special) -> usize {
        match special {
            Special::Blank | Special::EndOfWord => self.len(),
            Special::Start => self.len() + 1,
        }
    }

    /// Output classes of a CTC head: symbols plus blank.
    pub fn ctc_classes(&self) -> usize {
        self.len() + 1
    }

    /// Output classes of the attention decoder: symbols plus `[EOW]`.
    pub fn attention_classes(&self) -> usize {
        self.len() + 1
    }

    /// Width of the attention decoder's one-hot input: symbols, `[EOW]`, `[S]`.
    pub fn attention_embedding(&self) -> usize {
        self.len() + 2
    }

    /// Maps a transcription to ids; on failure returns the offending chars.
    pub fn encode(&self, text: &str) -> std::result::Result<Vec<usize>, Vec<char>> {
        let mut bad = Vec::new();
        let ids: Vec<usize> = text
            .chars()
            .filter_map(|c| {
                let id = self.id(c);
                if id.is_none() {
                    bad.push(c);
                }
                id
            })
            .collect();
        if bad.is_empty() {
            Ok(ids)
        } else {
            Err(bad)
        }
    }

    /// Inverse of [`encode`](Self::encode); special ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.symbol(i)).collect()
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }
}

impl Default for Charset {
    fn default() -> Self {
        Self::printable_ascii()
    }
}

impl Serialize for Charset {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for Charset {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Charset::new(s.chars()).map_err(serde::de::Error::custom)
    }
}

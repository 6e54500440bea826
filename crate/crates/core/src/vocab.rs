//! Character-level vocabulary.
//!
//! A fixed small symbol set: control tokens, the ten digits as individual
//! symbols, letters, and the punctuation needed by the coordinate template
//! and the keypoint descriptions. Tokenization is one symbol per character,
//! so it is prefix-free and encode/decode round-trips exactly on covered
//! text.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD_TAG: &str = "<pad>";
pub const BOS_TAG: &str = "<bos>";
pub const EOS_TAG: &str = "<eos>";
pub const SEP_USER_TAG: &str = "<sep-user>";
pub const SEP_ASSISTANT_TAG: &str = "<sep-assistant>";

const PUNCTUATION: &[char] = &['.', ',', '[', ']', '?', '-', '\'', ':'];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Symbol {
    Special(String),
    Char(char),
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<Symbol>,
    by_char: HashMap<char, TokenId>,
    digit_base: TokenId,
}

impl Vocabulary {
    /// The default character set: 5 control tokens, digits 0-9 (consecutive
    /// ids), space, a-z, A-Z, and punctuation.
    pub fn default_charset() -> Self {
        let mut symbols = vec![
            Symbol::Special(PAD_TAG.into()),
            Symbol::Special(BOS_TAG.into()),
            Symbol::Special(EOS_TAG.into()),
            Symbol::Special(SEP_USER_TAG.into()),
            Symbol::Special(SEP_ASSISTANT_TAG.into()),
        ];
        let digit_base = symbols.len();
        for d in '0'..='9' {
            symbols.push(Symbol::Char(d));
        }
        symbols.push(Symbol::Char(' '));
        for c in 'a'..='z' {
            symbols.push(Symbol::Char(c));
        }
        for c in 'A'..='Z' {
            symbols.push(Symbol::Char(c));
        }
        for &c in PUNCTUATION {
            symbols.push(Symbol::Char(c));
        }
        Self::from_symbols(symbols, digit_base)
    }

    fn from_symbols(symbols: Vec<Symbol>, digit_base: TokenId) -> Self {
        let mut by_char = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if let Symbol::Char(c) = s {
                by_char.insert(*c, i);
            }
        }
        Vocabulary {
            symbols,
            by_char,
            digit_base,
        }
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn pad(&self) -> TokenId {
        0
    }
    pub fn bos(&self) -> TokenId {
        1
    }
    pub fn eos(&self) -> TokenId {
        2
    }
    pub fn sep_user(&self) -> TokenId {
        3
    }
    pub fn sep_assistant(&self) -> TokenId {
        4
    }

    /// First digit id; ids `digit_base()..digit_base()+10` are '0'..'9'.
    pub fn digit_base(&self) -> TokenId {
        self.digit_base
    }

    pub fn digit_id(&self, value: u8) -> TokenId {
        debug_assert!(value < 10);
        self.digit_base + value as usize
    }

    /// Digit value of a token, if it is a digit token.
    pub fn digit_value(&self, id: TokenId) -> Option<u8> {
        if id >= self.digit_base && id < self.digit_base + 10 {
            Some((id - self.digit_base) as u8)
        } else {
            None
        }
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        matches!(self.symbols.get(id), Some(Symbol::Special(_)))
    }

    pub fn char_id(&self, c: char) -> Option<TokenId> {
        self.by_char.get(&c).copied()
    }

    /// Encode plain text; errors on any character outside the vocabulary.
    pub fn encode_text(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                self.by_char.get(&c).copied().ok_or_else(|| {
                    Error::Domain(format!("character {c:?} not in vocabulary"))
                })
            })
            .collect()
    }

    /// Decode to display text; special tokens render as their tags.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            match self.symbols.get(id) {
                Some(Symbol::Char(c)) => out.push(*c),
                Some(Symbol::Special(tag)) => out.push_str(tag),
                None => return Err(Error::Domain(format!("token id {id} out of range"))),
            }
        }
        Ok(out)
    }

    /// Decode only character symbols, skipping specials. Used to recover the
    /// raw answer text from a generated sequence.
    pub fn decode_chars(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter_map(|&id| match self.symbols.get(id) {
                Some(Symbol::Char(c)) => Some(*c),
                _ => None,
            })
            .collect()
    }

    /// Serialize as a JSON array of symbol strings.
    pub fn to_json(&self) -> String {
        let strings: Vec<String> = self
            .symbols
            .iter()
            .map(|s| match s {
                Symbol::Special(tag) => tag.clone(),
                Symbol::Char(c) => c.to_string(),
            })
            .collect();
        serde_json::to_string_pretty(&strings).expect("string array serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let strings: Vec<String> = serde_json::from_str(json)?;
        let mut symbols = Vec::with_capacity(strings.len());
        for s in &strings {
            if s.chars().count() == 1 {
                symbols.push(Symbol::Char(s.chars().next().unwrap()));
            } else {
                symbols.push(Symbol::Special(s.clone()));
            }
        }
        // Digits must occupy ten consecutive ids.
        let digit_base = symbols
            .iter()
            .position(|s| *s == Symbol::Char('0'))
            .ok_or_else(|| Error::Config("vocabulary missing digit '0'".into()))?;
        for d in 0..10u8 {
            let want = Symbol::Char(char::from(b'0' + d));
            if symbols.get(digit_base + d as usize) != Some(&want) {
                return Err(Error::Config(
                    "vocabulary digits are not consecutive".into(),
                ));
            }
        }
        Ok(Self::from_symbols(symbols, digit_base))
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::default_charset()
    }
}

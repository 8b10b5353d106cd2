//! Character vocabulary and text normalization.
//!
//! Every string that reaches the model, the retriever or the metrics goes
//! through [`normalize`]: lowercase, characters outside the vocabulary
//! dropped, punctuation at word edges split into standalone tokens, and
//! whitespace collapsed to single spaces.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const CTX: usize = 2;
pub const ABBR: usize = 3;
pub const SEP: usize = 4;
pub const EOS: usize = 5;
/// Id of the space character, the first non-control entry.
pub const SPACE: usize = 6;

const CONTROL: [&str; 6] = ["<pad>", "<bos>", "<ctx>", "<abbr>", "<sep>", "<eos>"];

/// Punctuation characters the vocabulary can represent.
pub const PUNCTUATION: &str = ".,!?'\"-:;()&/$%+=*@#_";

/// Fixed character vocabulary: six control tokens, space, `a-z`, `0-9` and
/// [`PUNCTUATION`] — 64 ids in total.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut chars = vec![' '];
        chars.extend('a'..='z');
        chars.extend('0'..='9');
        chars.extend(PUNCTUATION.chars());
        Self { chars }
    }
}

impl Vocab {
    pub fn size(&self) -> usize {
        CONTROL.len() + self.chars.len()
    }

    pub fn is_control(id: usize) -> bool {
        id < CONTROL.len()
    }

    pub fn contains_char(&self, c: char) -> bool {
        self.chars.contains(&c)
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|p| p + CONTROL.len())
    }

    pub fn id_char(&self, id: usize) -> Option<char> {
        id.checked_sub(CONTROL.len()).and_then(|i| self.chars.get(i)).copied()
    }

    /// Ids of every character of `text`; fails on the first unknown one.
    pub fn encode_str(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.char_id(c).ok_or(CoreError::UnknownChar(c)))
            .collect()
    }

    /// Renders ids, spelling control tokens as `<name>`.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            if id < CONTROL.len() {
                s.push_str(CONTROL[id]);
            } else {
                s.push(self.id_char(id).ok_or(CoreError::UnknownToken {
                    id,
                    vocab: self.size(),
                })?);
            }
        }
        Ok(s)
    }

    /// Characters only; control tokens are skipped.
    pub fn decode_chars(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&id| self.id_char(id)).collect()
    }
}

pub fn is_punct(c: char) -> bool {
    PUNCTUATION.contains(c)
}

/// Result of [`normalize_with_stats`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Normalized {
    pub text: String,
    /// Characters removed because the vocabulary cannot represent them.
    pub dropped: usize,
}

/// Lowercases, strips out-of-vocabulary characters, detaches edge punctuation
/// into single-character tokens and collapses whitespace.
///
/// Punctuation inside a word (`don't`, `well-known`) stays attached.
pub fn normalize_with_stats(text: &str) -> Normalized {
    let vocab = Vocab::default();
    let mut dropped = 0;
    let mut cleaned = String::with_capacity(text.len());
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            cleaned.push(' ');
        } else if vocab.contains_char(c) {
            cleaned.push(c);
        } else {
            dropped += 1;
        }
    }
    let mut tokens: Vec<String> = Vec::new();
    for word in cleaned.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let lead = chars.iter().take_while(|c| is_punct(**c)).count();
        if lead == chars.len() {
            tokens.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| is_punct(**c)).count();
        tokens.extend(chars[..lead].iter().map(|c| c.to_string()));
        tokens.push(chars[lead..chars.len() - trail].iter().collect());
        tokens.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    Normalized {
        text: tokens.join(" "),
        dropped,
    }
}

pub fn normalize(text: &str) -> String {
    normalize_with_stats(text).text
}

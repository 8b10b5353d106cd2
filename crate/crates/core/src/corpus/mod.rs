//! Abbreviation scheme, dataset ingestion, splitting and encoding.

pub mod encode;
pub mod ingest;
pub mod split;
pub mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::text::{is_punct, normalize};

pub use encode::{encode_example, encode_query, framed_text, EncodedSequence};
pub use ingest::{ingest, ingest_str, select_characters, to_jsonl, CharacterSelection, Format};
pub use split::{chronological_split, SplitPolicy, SplitSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    DialogCorpus,
    MovieCharacter,
    SyntheticUser,
}

/// A sentence paired with its word-initial abbreviation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbbrevExample {
    pub abbreviation: String,
    pub expansion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub timestamp: u64,
    pub speaker_id: String,
    pub source: Source,
}

impl AbbrevExample {
    /// Normalizes `text` (and `context`) and derives the abbreviation.
    pub fn from_text(
        text: &str,
        context: Option<&str>,
        timestamp: u64,
        speaker_id: &str,
        source: Source,
    ) -> Result<Self> {
        let expansion = normalize(text);
        let abbreviation = abbreviate(&expansion)?;
        let context = context.map(normalize).filter(|c| !c.is_empty());
        Ok(Self {
            abbreviation,
            expansion,
            context,
            timestamp,
            speaker_id: speaker_id.to_string(),
            source,
        })
    }

    /// Stable identifier: speaker and timestamp.
    pub fn id(&self) -> String {
        format!("{}@{}", self.speaker_id, self.timestamp)
    }

    pub fn abbreviation_length(&self) -> usize {
        abbreviation_length(&self.abbreviation)
    }
}

/// Word-initial abbreviation: every word contributes its first character and
/// standalone punctuation is kept as is.
///
/// ```
/// # use abbrex_core::corpus::abbreviate;
/// assert_eq!(abbreviate("Sweet, I love that Robin!").unwrap(), "s , i l t r !");
/// ```
pub fn abbreviate(sentence: &str) -> Result<String> {
    let norm = normalize(sentence);
    if norm.is_empty() {
        return Err(CoreError::EmptyInput("sentence to abbreviate"));
    }
    let parts: Vec<String> = norm
        .split(' ')
        .map(|tok| {
            let mut chars = tok.chars();
            let first = chars.next().expect("tokens are non-empty");
            if is_punct(first) && chars.next().is_none() {
                tok.to_string()
            } else {
                first.to_string()
            }
        })
        .collect();
    Ok(parts.join(" "))
}

/// Number of space-separated tokens, punctuation included.
pub fn abbreviation_length(abbreviation: &str) -> usize {
    abbreviation.split_whitespace().count()
}

/// The `n` most frequent non-punctuation words, ties broken alphabetically.
pub fn top_words<'a>(texts: impl IntoIterator<Item = &'a str>, n: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in texts {
        for w in t.split_whitespace() {
            if !w.chars().all(is_punct) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(n).map(|(w, _)| w.to_string()).collect()
}

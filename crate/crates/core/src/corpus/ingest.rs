//! Loading utterances from JSONL dialog files and Cornell-style movie lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AbbrevExample, Source};
use crate::error::{CoreError, Result};

/// Field separator of the Cornell movie-dialog distribution.
pub const CORNELL_SEPARATOR: &str = " +++$+++ ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// One `{"text", "speaker", "t", "context"?}` object per line.
    Jsonl,
    /// `line_id +++$+++ character_id +++$+++ movie_id [+++$+++ name] +++$+++ text`
    CornellSeparator,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
    speaker: String,
    t: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context: Option<String>,
}

pub fn ingest(path: impl AsRef<Path>, format: Format) -> Result<Vec<AbbrevExample>> {
    let text = fs::read_to_string(path)?;
    let source = match format {
        Format::Jsonl => Source::DialogCorpus,
        Format::CornellSeparator => Source::MovieCharacter,
    };
    ingest_str(&text, format, source)
}

/// Parses `text`. Blank lines are skipped; any other unparsable line or an
/// utterance with no representable characters is an error naming the line.
pub fn ingest_str(text: &str, format: Format, source: Source) -> Result<Vec<AbbrevExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| CoreError::Parse {
            line: line_no,
            message,
        };
        let ex = match format {
            Format::Jsonl => {
                let r: JsonlRecord =
                    serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
                AbbrevExample::from_text(&r.text, r.context.as_deref(), r.t, &r.speaker, source)
            }
            Format::CornellSeparator => {
                let fields: Vec<&str> = line.split(CORNELL_SEPARATOR).collect();
                let (character, movie, text) = match fields.as_slice() {
                    [_, c, m, t] | [_, c, m, _, t] => (*c, *m, *t),
                    _ => {
                        return Err(parse(format!(
                            "expected 4 or 5 fields, found {}",
                            fields.len()
                        )))
                    }
                };
                if character.trim().is_empty() || movie.trim().is_empty() {
                    return Err(parse("empty character or movie id".into()));
                }
                let speaker = format!("{}/{}", movie.trim(), character.trim());
                AbbrevExample::from_text(text, None, out.len() as u64, &speaker, source)
            }
        }
        .map_err(|e| parse(e.to_string()))?;
        out.push(ex);
    }
    if out.is_empty() {
        return Err(CoreError::NoRecords);
    }
    Ok(out)
}

/// Serializes examples in the JSONL ingestion schema.
pub fn to_jsonl(examples: &[AbbrevExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        let rec = JsonlRecord {
            text: ex.expansion.clone(),
            speaker: ex.speaker_id.clone(),
            t: ex.timestamp,
            context: ex.context.clone(),
        };
        s.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// Characters with enough lines for personalization.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CharacterSelection {
    /// `(speaker_id, examples)` in speaker-id order.
    pub characters: Vec<(String, Vec<AbbrevExample>)>,
    pub mean_count: f64,
    pub median_count: f64,
}

impl CharacterSelection {
    pub fn counts(&self) -> Vec<(String, usize)> {
        self.characters
            .iter()
            .map(|(s, e)| (s.clone(), e.len()))
            .collect()
    }
}

pub fn select_characters(examples: &[AbbrevExample], min_conversations: usize) -> CharacterSelection {
    let mut by: BTreeMap<&str, Vec<AbbrevExample>> = BTreeMap::new();
    for ex in examples {
        by.entry(&ex.speaker_id).or_default().push(ex.clone());
    }
    let characters: Vec<(String, Vec<AbbrevExample>)> = by
        .into_iter()
        .filter(|(_, v)| v.len() >= min_conversations)
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let mut counts: Vec<usize> = characters.iter().map(|(_, v)| v.len()).collect();
    counts.sort_unstable();
    let n = counts.len();
    let mean_count = if n == 0 {
        0.0
    } else {
        counts.iter().sum::<usize>() as f64 / n as f64
    };
    let median_count = match n {
        0 => 0.0,
        _ if n % 2 == 1 => counts[n / 2] as f64,
        _ => (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0,
    };
    CharacterSelection {
        characters,
        mean_count,
        median_count,
    }
}

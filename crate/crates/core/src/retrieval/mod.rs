//! Nearest-neighbor retrieval over a user's abbreviation history and the
//! few-shot prompts built from it.

mod embed;
mod fewshot;

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{AbbrevExample, Source};
use crate::error::{CoreError, Result};

pub use embed::{bigrams, AbbrevEmbedder, AbbrevEmbedding, BigramEmbedder};
pub use fewshot::{build_fewshot_prompt, FewShotPrompt};

/// Number of demonstrations retrieved per query.
pub const DEFAULT_K: usize = 4;

#[derive(Clone, Debug)]
pub struct IndexEntry {
    pub embedding: AbbrevEmbedding,
    pub example: AbbrevExample,
}

/// A search hit.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor<'a> {
    /// Insertion position in the index.
    pub position: usize,
    pub distance: f64,
    pub example: &'a AbbrevExample,
}

/// Exact Euclidean kNN over embedded abbreviations, in insertion order.
#[derive(Clone)]
pub struct RetrievalIndex {
    embedder: Arc<dyn AbbrevEmbedder>,
    entries: Vec<IndexEntry>,
}

impl Default for RetrievalIndex {
    fn default() -> Self {
        Self::new(Arc::new(BigramEmbedder::default()))
    }
}

impl std::fmt::Debug for RetrievalIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetrievalIndex").field("len", &self.entries.len()).finish()
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Serialize, Deserialize)]
struct MemoryRecord {
    abbreviation: String,
    expansion: String,
    timestamp: u64,
}

impl RetrievalIndex {
    pub fn new(embedder: Arc<dyn AbbrevEmbedder>) -> Self {
        Self {
            embedder,
            entries: Vec::new(),
        }
    }

    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a AbbrevExample>) -> Result<Self> {
        let mut idx = Self::default();
        for e in examples {
            idx.insert(e.clone())?;
        }
        Ok(idx)
    }

    pub fn embedder(&self) -> &dyn AbbrevEmbedder {
        self.embedder.as_ref()
    }

    pub fn insert(&mut self, example: AbbrevExample) -> Result<()> {
        let embedding = self.embedder.embed(&example.abbreviation)?;
        self.entries.push(IndexEntry { embedding, example });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// The `k` closest entries: ascending distance, then newer timestamp,
    /// then earlier insertion.
    pub fn knn(&self, query: &AbbrevEmbedding, k: usize) -> Result<Vec<Neighbor<'_>>> {
        if self.entries.is_empty() {
            return Err(CoreError::EmptyInput("retrieval index"));
        }
        if k == 0 {
            return Err(CoreError::InvalidArgument("k must be ≥ 1".into()));
        }
        let mut hits: Vec<Neighbor<'_>> = self
            .entries
            .iter()
            .enumerate()
            .map(|(position, e)| Neighbor {
                position,
                distance: euclidean(&query.vector, &e.embedding.vector),
                example: &e.example,
            })
            .collect();
        let order = |a: &Neighbor<'_>, b: &Neighbor<'_>| {
            a.distance
                .partial_cmp(&b.distance)
                .unwrap_or(Ordering::Equal)
                .then(b.example.timestamp.cmp(&a.example.timestamp))
                .then(a.position.cmp(&b.position))
        };
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        Ok(hits)
    }

    /// Embeds `abbreviation` and searches.
    pub fn search(&self, abbreviation: &str, k: usize) -> Result<Vec<Neighbor<'_>>> {
        let q = self.embedder.embed(abbreviation)?;
        self.knn(&q, k)
    }

    /// One `{abbreviation, expansion, timestamp}` object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&memory_line(&e.example));
        }
        s
    }

    /// Rebuilds an index from [`RetrievalIndex::to_jsonl`] output, recomputing
    /// embeddings. A final line without its newline is treated as a torn
    /// write and ignored; the returned flag reports whether that happened.
    pub fn from_jsonl(text: &str, speaker_id: &str, source: Source) -> Result<(Self, bool)> {
        let mut idx = Self::default();
        let torn = !text.is_empty() && !text.ends_with('\n');
        let complete = if torn {
            &text[..text.rfind('\n').map_or(0, |i| i + 1)]
        } else {
            text
        };
        for (i, line) in complete.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: MemoryRecord = serde_json::from_str(line).map_err(|e| CoreError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            idx.insert(AbbrevExample {
                abbreviation: r.abbreviation,
                expansion: r.expansion,
                context: None,
                timestamp: r.timestamp,
                speaker_id: speaker_id.to_string(),
                source,
            })?;
        }
        Ok((idx, torn))
    }
}

/// Serialized memory line (newline-terminated) for one example.
pub fn memory_line(example: &AbbrevExample) -> String {
    let r = MemoryRecord {
        abbreviation: example.abbreviation.clone(),
        expansion: example.expansion.clone(),
        timestamp: example.timestamp,
    };
    let mut s = serde_json::to_string(&r).expect("record serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(text: &str, t: u64) -> AbbrevExample {
        AbbrevExample::from_text(text, None, t, "u", Source::SyntheticUser).unwrap()
    }

    #[test]
    fn exact_query_comes_first() {
        let idx = RetrievalIndex::from_examples(&[
            ex("please call mike", 1),
            ex("i love that robin", 2),
            ex("sweet i love that robin", 3),
        ])
        .unwrap();
        let hits = idx.search("i l t r", 2).unwrap();
        assert_eq!(hits[0].example.expansion, "i love that robin");
        assert!(hits[0].distance.abs() < 1e-12);
        assert_eq!(idx.search("x", 10).unwrap().len(), 3);
    }

    #[test]
    fn ties_prefer_recent_then_inserted_first() {
        let idx = RetrievalIndex::from_examples(&[
            ex("please call mike", 1),
            ex("please call mary", 5),
            ex("please call mark", 5),
        ])
        .unwrap();
        let hits = idx.search("p c m", 3).unwrap();
        let order: Vec<usize> = hits.iter().map(|h| h.position).collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    #[test]
    fn empty_index_is_an_error() {
        assert!(RetrievalIndex::default().search("a b", 1).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_torn_tail() {
        let idx = RetrievalIndex::from_examples(&[ex("hello there", 1), ex("good night", 2)]).unwrap();
        let text = idx.to_jsonl();
        let (back, torn) = RetrievalIndex::from_jsonl(&text, "u", Source::SyntheticUser).unwrap();
        assert!(!torn);
        assert_eq!(back.to_jsonl(), text);
        let cut = &text[..text.len() - 5];
        let (partial, torn) = RetrievalIndex::from_jsonl(cut, "u", Source::SyntheticUser).unwrap();
        assert!(torn);
        assert_eq!(partial.len(), 1);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Unit-norm embedding of an abbreviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbbrevEmbedding {
    pub vector: Vec<f32>,
    pub source: String,
}

/// Maps abbreviations to unit vectors. Implementations must be
/// deterministic: stored indexes are rebuilt by re-embedding.
pub trait AbbrevEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, abbreviation: &str) -> Result<AbbrevEmbedding>;
}

/// Hashed bag of character bigrams over the abbreviation's tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BigramEmbedder {
    pub dim: usize,
}

impl Default for BigramEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

/// Adjacent token pairs of the boundary-padded token stream `^ t₁ … tₙ $`.
pub fn bigrams(abbreviation: &str) -> Vec<String> {
    let toks: Vec<&str> = std::iter::once("^")
        .chain(abbreviation.split_whitespace())
        .chain(std::iter::once("$"))
        .collect();
    toks.windows(2).map(|w| format!("{}{}", w[0], w[1])).collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl BigramEmbedder {
    pub fn bucket(&self, bigram: &str) -> usize {
        (fnv1a(bigram.as_bytes()) % self.dim as u64) as usize
    }
}

impl AbbrevEmbedder for BigramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, abbreviation: &str) -> Result<AbbrevEmbedding> {
        if abbreviation.trim().is_empty() {
            return Err(CoreError::EmptyInput("abbreviation to embed"));
        }
        let mut counts = vec![0.0f64; self.dim];
        for b in bigrams(abbreviation) {
            counts[self.bucket(&b)] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        Ok(AbbrevEmbedding {
            vector: counts.iter().map(|c| (c / norm) as f32).collect(),
            source: abbreviation.to_string(),
        })
    }
}

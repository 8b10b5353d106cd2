//! Exhaustive nearest-neighbour reference and random memories.

use abbrex_core::corpus::{AbbrevExample, Source};
use abbrex_core::retrieval::{euclidean, AbbrevEmbedder, BigramEmbedder};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const WORDS: &[&str] = &[
    "i", "love", "that", "robin", "sweet", "what", "a", "dunce", "okie", "dokie", "great", "question",
    "dude", "and", "mommy", "tea", "please", "call", "me", "later", "the", "park", "now", ",", "?",
];

pub fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..7);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn random_index(rng: &mut ChaCha8Rng, n: usize) -> Vec<AbbrevExample> {
    (0..n)
        .map(|_| {
            // Timestamps repeat so the recency tie-break is exercised.
            let t = rng.gen_range(0..n as u64 / 2 + 1);
            AbbrevExample::from_text(&sentence(rng), None, t, "u", Source::SyntheticUser).unwrap()
        })
        .collect()
}

/// Exhaustive search: sort everything by (distance, newer first, insertion order).
pub fn brute_force(examples: &[AbbrevExample], query: &str, k: usize) -> Vec<usize> {
    let e = BigramEmbedder::default();
    let q = e.embed(query).unwrap();
    let mut all: Vec<(f64, u64, usize)> = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| (euclidean(&e.embed(&ex.abbreviation).unwrap().vector, &q.vector), ex.timestamp, i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    all.into_iter().take(k).map(|x| x.2).collect()
}

//! Independent sentence-BLEU reference.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Four-gram BLEU with brevity penalty; unigram precision unsmoothed, higher
/// orders add one to matches and totals.
pub fn reference_bleu(cand: &str, refr: &str) -> f64 {
    let c: Vec<String> = cand.split_whitespace().map(|s| s.to_lowercase()).collect();
    let r: Vec<String> = refr.split_whitespace().map(|s| s.to_lowercase()).collect();
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let grams = |toks: &[String], n: usize| -> BTreeMap<String, i64> {
        let mut m = BTreeMap::new();
        if toks.len() >= n {
            for i in 0..=toks.len() - n {
                *m.entry(toks[i..i + n].join("\u{1}")).or_insert(0) += 1;
            }
        }
        m
    };
    let mut precisions = Vec::new();
    for n in 1..=4 {
        let cg = grams(&c, n);
        let rg = grams(&r, n);
        let total: i64 = cg.values().sum();
        let clipped: i64 = cg.iter().map(|(g, &k)| k.min(*rg.get(g).unwrap_or(&0))).sum();
        precisions.push(if n == 1 {
            clipped as f64 / total as f64
        } else {
            (clipped + 1) as f64 / (total + 1) as f64
        });
    }
    if precisions[0] == 0.0 {
        return 0.0;
    }
    let geo = (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp();
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * geo
}

pub const WORDS: &[&str] = &["i", "love", "that", "robin", "the", "tea", "is", "hot", "please", "call", "mom", "now"];

/// Fifty (candidate, reference) pairs; half the candidates are edits of their
/// reference so that most pairs overlap.
pub fn pairs(seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(1..10);
        (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    };
    (0..50)
        .map(|_| {
            let reference = s(&mut rng);
            let candidate = if rng.gen_bool(0.5) {
                let mut w: Vec<&str> = reference.split(' ').collect();
                if w.len() > 1 {
                    w.remove(rng.gen_range(0..w.len()));
                }
                w.push(WORDS.choose(&mut rng).unwrap());
                w.join(" ")
            } else {
                s(&mut rng)
            };
            (candidate, reference)
        })
        .collect()
}

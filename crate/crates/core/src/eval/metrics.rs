//! Accuracy@k, BLEU@k, length slices and relative benefit.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::text::normalize;

/// Candidates considered per example.
pub const TOP_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub abbreviation_length: usize,
    pub gold: String,
    pub top: Vec<String>,
    pub hit: bool,
    pub bleu: f64,
}

impl EvalRow {
    /// Scores the (at most [`TOP_K`]) leading candidates against `gold`.
    pub fn score(id: String, abbreviation_length: usize, gold: &str, candidates: &[String]) -> Self {
        let top: Vec<String> = candidates.iter().take(TOP_K).cloned().collect();
        let g = normalize(gold);
        let hit = top.iter().any(|c| normalize(c) == g);
        let bleu = top
            .iter()
            .map(|c| sentence_bleu(c, gold))
            .fold(0.0, f64::max);
        Self {
            id,
            abbreviation_length,
            gold: g,
            top,
            hit,
            bleu,
        }
    }
}

fn ngrams<'t, 'a>(toks: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU over normalized whitespace tokens: 4-gram, brevity penalty,
/// unsmoothed unigram precision and add-one smoothing for n ≥ 2.
pub fn sentence_bleu(candidate: &str, reference: &str) -> f64 {
    let c_norm = normalize(candidate);
    let r_norm = normalize(reference);
    let cand: Vec<&str> = c_norm.split_whitespace().collect();
    let refr: Vec<&str> = r_norm.split_whitespace().collect();
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cn = ngrams(&cand, n);
        let rn = ngrams(&refr, n);
        let total: usize = cn.values().sum();
        let matched: usize = cn
            .iter()
            .map(|(g, &c)| c.min(rn.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}

/// Percentage of rows whose gold expansion is among the candidates.
pub fn accuracy_at_k(rows: &[EvalRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(CoreError::EmptyInput("evaluation rows"));
    }
    Ok(100.0 * rows.iter().filter(|r| r.hit).count() as f64 / rows.len() as f64)
}

/// Mean of per-row best-candidate BLEU, ×100.
pub fn bleu_at_k(rows: &[EvalRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(CoreError::EmptyInput("evaluation rows"));
    }
    Ok(100.0 * rows.iter().map(|r| r.bleu).sum::<f64>() / rows.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub length: usize,
    pub count: usize,
    pub accuracy: f64,
    pub bleu: f64,
}

/// Metrics per abbreviation length; lengths without rows are absent.
pub fn length_sliced_report(rows: &[EvalRow]) -> Vec<LengthBucket> {
    let mut by: BTreeMap<usize, Vec<EvalRow>> = BTreeMap::new();
    for r in rows {
        by.entry(r.abbreviation_length).or_default().push(r.clone());
    }
    by.into_iter()
        .map(|(length, rs)| LengthBucket {
            length,
            count: rs.len(),
            accuracy: accuracy_at_k(&rs).expect("non-empty bucket"),
            bleu: bleu_at_k(&rs).expect("non-empty bucket"),
        })
        .collect()
}

pub fn length_report_csv(buckets: &[LengthBucket]) -> String {
    let mut s = String::from("abbreviation_length,count,accuracy_at_5,bleu_at_5\n");
    for b in buckets {
        s.push_str(&format!("{},{},{:.2},{:.2}\n", b.length, b.count, b.accuracy, b.bleu));
    }
    s
}

/// Relative improvement of a personalized model over the base.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Benefit {
    /// Rounded percentage, half up.
    Percent(i64),
    /// Personalized accuracy did not exceed the base.
    NoBenefit,
    /// Base accuracy is zero.
    Undefined,
}

impl fmt::Display for Benefit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Benefit::Percent(p) => write!(f, "{p}%"),
            Benefit::NoBenefit => f.write_str("-"),
            Benefit::Undefined => f.write_str("n/a"),
        }
    }
}

pub fn personalization_benefit(base_acc: f64, pers_acc: f64) -> Benefit {
    if base_acc <= 0.0 {
        return Benefit::Undefined;
    }
    if pers_acc <= base_acc {
        return Benefit::NoBenefit;
    }
    let rel = 100.0 * (pers_acc - base_acc) / base_acc;
    // The epsilon keeps exact halves (12.5) from slipping below .5.
    Benefit::Percent((rel + 0.5 + 1e-9).floor() as i64)
}

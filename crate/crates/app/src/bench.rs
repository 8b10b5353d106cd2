//! Inference-cost and per-character personalization benchmarks.

use std::time::Instant;

use abbrex_core::corpus::{chronological_split, encode_example, top_words, AbbrevExample, CharacterSelection};
use abbrex_core::eval::{
    accuracy_at_k, bleu_at_k, evaluate, personalization_benefit, Benefit, Conditioning, DecodeConfig,
};
use abbrex_core::model::graph::{prompted, Slot};
use abbrex_core::model::{init_soft_prompt, InitStrategy, Model, Session, SoftPrompt, Wordlists};
use abbrex_core::tuning::{prompt_tune, TrainConfig};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::{AppError, Result};

/// Token throughput with and without a soft prompt on a fixed workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub examples: usize,
    /// Mean positions per example (`T`).
    pub mean_tokens: f64,
    /// Soft-prompt length (`L`).
    pub prompt_len: usize,
    pub base_tokens_per_sec: f64,
    pub prompted_tokens_per_sec: f64,
    /// Prompted over base throughput.
    pub ratio: f64,
    /// `T / (T + L) · 0.9`: a prompt may cost at most its extra positions,
    /// with 10% measurement slack.
    pub bound: f64,
    pub holds: bool,
}

/// Feeds each example's framed sequence position by position, as decoding
/// does, so both runs process exactly the same tokens.
fn run_workload(model: &Model, prompt: Option<&SoftPrompt>, seqs: &[Vec<usize>], split_at: &[usize]) -> Result<()> {
    for (seq, &cut) in seqs.iter().zip(split_at) {
        let mut s = Session::new(model, prompt.map(|p| &p.matrix))?;
        s.extend_last(&prompted(s.prompt_len(), &seq[..cut]))?;
        for &t in &seq[cut..] {
            s.extend_last(&[Slot::Token(t)])?;
        }
    }
    Ok(())
}

/// Best-of-`repeats` timing of the fixture with and without `prompt`.
pub fn throughput(model: &Model, prompt: &SoftPrompt, fixture: &[AbbrevExample], repeats: usize) -> Result<ThroughputReport> {
    if fixture.is_empty() {
        return Err(AppError::Invalid("throughput fixture is empty".into()));
    }
    let limit = model.config().max_context - prompt.len();
    let mut seqs = Vec::new();
    let mut cuts = Vec::new();
    for ex in fixture {
        let e = encode_example(ex, false, limit)?;
        let cut = e.loss_mask.iter().position(|&m| m).expect("expansion is masked");
        cuts.push(cut);
        seqs.push(e.token_ids);
    }
    let tokens: usize = seqs.iter().map(Vec::len).sum();
    let mut best = [f64::INFINITY; 2];
    for _ in 0..repeats.max(1) {
        for (slot, p) in [(0, None), (1, Some(prompt))] {
            let t = Instant::now();
            run_workload(model, p, &seqs, &cuts)?;
            best[slot] = best[slot].min(t.elapsed().as_secs_f64());
        }
    }
    let base_tps = tokens as f64 / best[0];
    let prompted_tps = tokens as f64 / best[1];
    let t = tokens as f64 / seqs.len() as f64;
    let bound = t / (t + prompt.len() as f64) * 0.9;
    let ratio = prompted_tps / base_tps;
    Ok(ThroughputReport {
        examples: seqs.len(),
        mean_tokens: t,
        prompt_len: prompt.len(),
        base_tokens_per_sec: base_tps,
        prompted_tokens_per_sec: prompted_tps,
        ratio,
        bound,
        holds: ratio >= bound,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CharacterConfig {
    pub train: TrainConfig,
    pub init: InitStrategy,
    pub prompt_len: usize,
    pub decode: DecodeConfig,
    pub ratios: [f64; 3],
    pub max_abbrev_len: Option<usize>,
    /// Frequent base-corpus words, for the corpus-vocabulary initialization.
    pub corpus_vocab: Vec<String>,
}

/// One row of the per-character comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterRow {
    pub character: String,
    pub train: usize,
    pub test: usize,
    pub base_accuracy: f64,
    pub base_bleu: f64,
    pub personalized_accuracy: f64,
    pub personalized_bleu: f64,
    pub benefit: Benefit,
}

/// Prompt-tunes one soft prompt per character on its chronological train
/// split and compares base and personalized scores on its test split.
pub fn per_character(base: &Model, selection: &CharacterSelection, cfg: &CharacterConfig) -> Result<Vec<CharacterRow>> {
    let mut rows = Vec::new();
    for (name, examples) in &selection.characters {
        let split = chronological_split(examples, cfg.ratios, true, cfg.max_abbrev_len)?;
        let words = Wordlists {
            corpus_vocab: cfg.corpus_vocab.clone(),
            user_vocab: top_words(split.train.iter().map(|e| e.expansion.as_str()), 25),
            ..Default::default()
        };
        let init = init_soft_prompt(cfg.init, cfg.prompt_len, base, &words, cfg.train.seed, name)?;
        let (prompt, _) = prompt_tune(base, &split, &init, &cfg.train)?;
        let base_rows = evaluate(base, Conditioning::Plain, &split.test, &cfg.decode)?;
        let pers_rows = evaluate(base, Conditioning::SoftPrompt(&prompt.matrix), &split.test, &cfg.decode)?;
        let (ba, pa) = (accuracy_at_k(&base_rows)?, accuracy_at_k(&pers_rows)?);
        let row = CharacterRow {
            character: name.clone(),
            train: split.train.len(),
            test: split.test.len(),
            base_accuracy: ba,
            base_bleu: bleu_at_k(&base_rows)?,
            personalized_accuracy: pa,
            personalized_bleu: bleu_at_k(&pers_rows)?,
            benefit: personalization_benefit(ba, pa),
        };
        info!(character = %name, base = ba, personalized = pa, "character done");
        rows.push(row);
    }
    Ok(rows)
}

/// Base vs personalized accuracy@5 / BLEU@5 and relative benefit per
/// character, then the average row.
pub fn per_character_csv(rows: &[CharacterRow]) -> String {
    let mut s = String::from(
        "character,train,test,base_accuracy_at_5,base_bleu_at_5,personalized_accuracy_at_5,personalized_bleu_at_5,relative_benefit\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.2},{:.2},{:.2},{:.2},{}\n",
            r.character,
            r.train,
            r.test,
            r.base_accuracy,
            r.base_bleu,
            r.personalized_accuracy,
            r.personalized_bleu,
            r.benefit
        ));
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: fn(&CharacterRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let (ba, pa) = (mean(|r| r.base_accuracy), mean(|r| r.personalized_accuracy));
        s.push_str(&format!(
            "average,{},{},{:.2},{:.2},{:.2},{:.2},{}\n",
            rows.iter().map(|r| r.train).sum::<usize>(),
            rows.iter().map(|r| r.test).sum::<usize>(),
            ba,
            mean(|r| r.base_bleu),
            pa,
            mean(|r| r.personalized_bleu),
            personalization_benefit(ba, pa)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_marks_non_improving_rows() {
        let row = |c: &str, b: f64, p: f64| CharacterRow {
            character: c.into(),
            train: 10,
            test: 5,
            base_accuracy: b,
            base_bleu: 1.0,
            personalized_accuracy: p,
            personalized_bleu: 2.0,
            benefit: personalization_benefit(b, p),
        };
        let csv = per_character_csv(&[row("george", 50.0, 56.25), row("sonny", 60.0, 60.0)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(",13%"), "{}", lines[1]);
        assert!(lines[2].ends_with(",-"), "{}", lines[2]);
        assert!(lines[3].starts_with("average,20,10,55.00"));
    }
}

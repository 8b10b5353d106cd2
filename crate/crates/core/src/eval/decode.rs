//! Sampling decoder with frequency-ranked candidates.
//!
//! Sample `i` draws from its own RNG stream, so samples are independent by
//! construction. Samples that have produced the same characters so far share
//! one cached session and split only when their draws diverge; the result is
//! identical to decoding each sample on its own, just cheaper.

use std::collections::HashMap;

use abbrex_numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{graph::prompted, Model, Session, Slot};
use crate::text::{normalize, Vocab, EOS, SEP};

/// Default protocol: 128 samples at temperature 1.0.
pub const DEFAULT_SAMPLES: usize = 128;
/// Longest expansion, in characters, before a sample is abandoned.
pub const MAX_EXPANSION_CHARS: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub n: usize,
    /// `0.0` selects greedy decoding.
    pub temperature: f64,
    pub max_chars: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_SAMPLES,
            temperature: 1.0,
            max_chars: MAX_EXPANSION_CHARS,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub count: usize,
    /// Index of the first sample that produced this text.
    pub first_sample: usize,
}

/// Why a sample produced no candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    Empty,
    Overflow,
    ControlToken,
}

/// Outcome of one sample, in sample order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleOutcome {
    Text(String),
    Excluded(Exclusion),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Count descending, ties by first sample.
    pub candidates: Vec<Candidate>,
    /// Samples that produced a candidate.
    pub n_samples: usize,
    pub excluded: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// Ranks raw outcomes: normalized text, counted, ordered by count then by
/// first appearance.
pub fn tally(outcomes: &[SampleOutcome], temperature: f64, seed: u64) -> DecodeResult {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut excluded = 0;
    for (i, o) in outcomes.iter().enumerate() {
        match o {
            SampleOutcome::Text(t) => {
                let slot = *index.entry(t.clone()).or_insert_with(|| {
                    candidates.push(Candidate {
                        text: t.clone(),
                        count: 0,
                        first_sample: i,
                    });
                    candidates.len() - 1
                });
                candidates[slot].count += 1;
            }
            SampleOutcome::Excluded(_) => excluded += 1,
        }
    }
    candidates.sort_by(|a, b| b.count.cmp(&a.count).then(a.first_sample.cmp(&b.first_sample)));
    DecodeResult {
        n_samples: outcomes.len() - excluded,
        candidates,
        excluded,
        temperature,
        seed,
    }
}

/// First `k` candidate strings.
pub fn top_k(result: &DecodeResult, k: usize) -> Vec<String> {
    result.candidates.iter().take(k).map(|c| c.text.clone()).collect()
}

/// Deterministic per-sample RNG.
pub fn sample_rng(seed: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    rng
}

/// Draws a token from `logits` at `temperature` using one uniform from `rng`.
pub fn draw<R: Rng>(logits: &[f32], temperature: f64, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    if temperature == 0.0 {
        return argmax(logits);
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let w: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut x = u * total;
    for (i, wi) in w.iter().enumerate() {
        if x < *wi {
            return i;
        }
        x -= wi;
    }
    // Rounding left a sliver past the last bucket.
    w.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn finish(vocab: &Vocab, chars: &[usize]) -> SampleOutcome {
    let text = normalize(&vocab.decode_chars(chars));
    if text.is_empty() {
        SampleOutcome::Excluded(Exclusion::Empty)
    } else {
        SampleOutcome::Text(text)
    }
}

fn check_prefix(prefix: &[usize]) -> Result<()> {
    if prefix.last() != Some(&SEP) {
        return Err(CoreError::InvalidArgument("decoding prefix must end with <sep>".into()));
    }
    Ok(())
}

struct Group<'m> {
    session: Session<'m>,
    logits: Vec<f32>,
    members: Vec<usize>,
    chars: Vec<usize>,
}

/// Raw per-sample outcomes of grouped sampling.
pub fn sample_outcomes(
    model: &Model,
    prompt: Option<&Tensor<f32>>,
    prefix: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<SampleOutcome>> {
    check_prefix(prefix)?;
    if cfg.n == 0 {
        return Err(CoreError::InvalidArgument("n must be ≥ 1".into()));
    }
    if !(cfg.temperature >= 0.0 && cfg.temperature.is_finite()) {
        return Err(CoreError::InvalidArgument(format!("temperature {}", cfg.temperature)));
    }
    let vocab = Vocab::default();
    let mut session = Session::new(model, prompt)?;
    let logits = session.extend_last(&prompted(session.prompt_len(), prefix))?;
    let mut rngs: Vec<ChaCha8Rng> = (0..cfg.n).map(|i| sample_rng(cfg.seed, i)).collect();
    let mut outcomes: Vec<Option<SampleOutcome>> = vec![None; cfg.n];
    let mut groups = vec![Group {
        session,
        logits,
        members: (0..cfg.n).collect(),
        chars: Vec::new(),
    }];
    while let Some(g) = groups.pop() {
        // Token → members that drew it, in first-drawn order.
        let mut split: Vec<(usize, Vec<usize>)> = Vec::new();
        for &m in &g.members {
            let t = draw(&g.logits, cfg.temperature, &mut rngs[m]);
            match split.iter_mut().find(|(tok, _)| *tok == t) {
                Some((_, v)) => v.push(m),
                None => split.push((t, vec![m])),
            }
        }
        let mut session = Some(g.session);
        let n_split = split.len();
        for (k, (tok, members)) in split.into_iter().enumerate() {
            let outcome = if tok == EOS {
                Some(finish(&vocab, &g.chars))
            } else if Vocab::is_control(tok) {
                Some(SampleOutcome::Excluded(Exclusion::ControlToken))
            } else if g.chars.len() + 1 > cfg.max_chars {
                Some(SampleOutcome::Excluded(Exclusion::Overflow))
            } else {
                None
            };
            if let Some(o) = outcome {
                for m in members {
                    outcomes[m] = Some(o.clone());
                }
                continue;
            }
            let mut s = if k + 1 == n_split {
                session.take().expect("last use")
            } else {
                session.as_ref().expect("still held").clone()
            };
            if s.remaining() == 0 {
                for m in members {
                    outcomes[m] = Some(SampleOutcome::Excluded(Exclusion::Overflow));
                }
                continue;
            }
            let logits = s.extend_last(&[Slot::Token(tok)])?;
            let mut chars = g.chars.clone();
            chars.push(tok);
            groups.push(Group {
                session: s,
                logits,
                members,
                chars,
            });
        }
    }
    Ok(outcomes.into_iter().map(|o| o.expect("every sample ends")).collect())
}

/// Samples `cfg.n` expansions after `prefix` (which ends at `<sep>`).
pub fn sample_expansions(
    model: &Model,
    prompt: Option<&Tensor<f32>>,
    prefix: &[usize],
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    let outcomes = sample_outcomes(model, prompt, prefix, cfg)?;
    Ok(tally(&outcomes, cfg.temperature, cfg.seed))
}

/// Decodes sample `i` alone, without prefix sharing. Used to check the
/// grouped decoder.
pub fn sample_one(
    model: &Model,
    prompt: Option<&Tensor<f32>>,
    prefix: &[usize],
    cfg: &DecodeConfig,
    i: usize,
) -> Result<SampleOutcome> {
    check_prefix(prefix)?;
    let vocab = Vocab::default();
    let mut rng = sample_rng(cfg.seed, i);
    let mut s = Session::new(model, prompt)?;
    let mut logits = s.extend_last(&prompted(s.prompt_len(), prefix))?;
    let mut chars = Vec::new();
    loop {
        let t = draw(&logits, cfg.temperature, &mut rng);
        if t == EOS {
            return Ok(finish(&vocab, &chars));
        }
        if Vocab::is_control(t) {
            return Ok(SampleOutcome::Excluded(Exclusion::ControlToken));
        }
        if chars.len() + 1 > cfg.max_chars || s.remaining() == 0 {
            return Ok(SampleOutcome::Excluded(Exclusion::Overflow));
        }
        chars.push(t);
        logits = s.extend_last(&[Slot::Token(t)])?;
    }
}

//! Expansion under each personalization strategy, and batch evaluation.

use std::fmt;
use std::str::FromStr;

use abbrex_numerics::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decode::{sample_expansions, top_k, DecodeConfig, DecodeResult};
use super::metrics::{EvalRow, TOP_K};
use crate::corpus::{encode_query, AbbrevExample};
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::retrieval::{build_fewshot_prompt, RetrievalIndex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Strategy {
    /// The base model on the bare abbreviation.
    Base,
    /// Few-shot prompting with randomly chosen history examples.
    Icl,
    /// A user-specific fully fine-tuned checkpoint.
    FineTuned,
    /// Few-shot prompting with retrieved nearest-neighbor examples.
    RaIcl,
    /// The base model with the user's soft prompt.
    PromptTuned,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Base,
        Strategy::Icl,
        Strategy::FineTuned,
        Strategy::RaIcl,
        Strategy::PromptTuned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::Icl => "icl",
            Strategy::FineTuned => "fineTuned",
            Strategy::RaIcl => "raIcl",
            Strategy::PromptTuned => "promptTuned",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

/// What the model is conditioned on besides the query.
#[derive(Clone, Copy)]
pub enum Conditioning<'a> {
    Plain,
    SoftPrompt(&'a Tensor<f32>),
    Retrieved { memory: &'a RetrievalIndex, k: usize },
    RandomShots { pool: &'a [AbbrevExample], k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub result: DecodeResult,
    /// Demonstrations actually placed in the prompt.
    pub shots: usize,
    /// Few-shot conditioning was requested but nothing was available.
    pub fallback: bool,
}

/// Prefix budget leaving room for a full-length expansion.
pub fn fewshot_budget(model: &Model, decode: &DecodeConfig) -> usize {
    model.config().max_context.saturating_sub(decode.max_chars + 1)
}

pub fn expand(
    model: &Model,
    cond: Conditioning<'_>,
    abbreviation: &str,
    context: Option<&str>,
    decode: &DecodeConfig,
) -> Result<Expansion> {
    let plain = |fallback| -> Result<Expansion> {
        let prefix = encode_query(abbreviation, context)?;
        Ok(Expansion {
            result: sample_expansions(model, None, &prefix, decode)?,
            shots: 0,
            fallback,
        })
    };
    let shots = |demos: Vec<&AbbrevExample>| -> Result<Expansion> {
        let p = match build_fewshot_prompt(&demos, abbreviation, fewshot_budget(model, decode)) {
            // Not even one demonstration fits next to the query.
            Err(CoreError::ContextOverflow { .. }) => return plain(true),
            r => r?,
        };
        Ok(Expansion {
            result: sample_expansions(model, None, &p.token_ids, decode)?,
            shots: p.shots,
            fallback: false,
        })
    };
    match cond {
        Conditioning::Plain => plain(false),
        Conditioning::SoftPrompt(p) => {
            let prefix = encode_query(abbreviation, context)?;
            Ok(Expansion {
                result: sample_expansions(model, Some(p), &prefix, decode)?,
                shots: 0,
                fallback: false,
            })
        }
        Conditioning::Retrieved { memory, k } => {
            if memory.is_empty() {
                return plain(true);
            }
            let hits = memory.search(abbreviation, k)?;
            shots(hits.iter().map(|h| h.example).collect())
        }
        Conditioning::RandomShots { pool, k } => {
            if pool.is_empty() {
                return plain(true);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(decode.seed ^ 0x1C1_5A3D);
            shots(pool.choose_multiple(&mut rng, k.min(pool.len())).collect())
        }
    }
}

/// Per-example decode seed: the global seed xor the example's position.
pub fn example_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Expands every example and scores its top-5.
pub fn evaluate(
    model: &Model,
    cond: Conditioning<'_>,
    examples: &[AbbrevExample],
    decode: &DecodeConfig,
) -> Result<Vec<EvalRow>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let cfg = decode.with_seed(example_seed(decode.seed, i));
            let e = expand(model, cond, &ex.abbreviation, None, &cfg)?;
            Ok(EvalRow::score(
                ex.id(),
                ex.abbreviation_length(),
                &ex.expansion,
                &top_k(&e.result, TOP_K),
            ))
        })
        .collect()
}

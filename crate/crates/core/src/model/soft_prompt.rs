//! Per-user soft prompts and their initialization strategies.

use std::fmt;
use std::str::FromStr;

use abbrex_numerics::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{CoreError, Result};
use crate::text::Vocab;

/// Default number of prompt rows.
pub const DEFAULT_PROMPT_LEN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Random,
    CorpusVocab,
    UserVocab,
    UserConcepts,
    ConceptAntonyms,
}

impl InitStrategy {
    pub const ALL: [InitStrategy; 5] = [
        InitStrategy::Random,
        InitStrategy::CorpusVocab,
        InitStrategy::UserVocab,
        InitStrategy::UserConcepts,
        InitStrategy::ConceptAntonyms,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InitStrategy::Random => "random",
            InitStrategy::CorpusVocab => "corpus_vocab",
            InitStrategy::UserVocab => "user_vocab",
            InitStrategy::UserConcepts => "user_concepts",
            InitStrategy::ConceptAntonyms => "concept_antonyms",
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitStrategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        InitStrategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown init strategy {s:?}")))
    }
}

/// Word sources for the word-based strategies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Wordlists {
    /// Most frequent words of the base training corpus.
    pub corpus_vocab: Vec<String>,
    /// Most frequent words of the user's own data.
    pub user_vocab: Vec<String>,
    /// Hand-picked concepts and names characteristic of the user.
    pub user_concepts: Vec<String>,
    /// Opposites of the user concepts (a deliberately mismatched control).
    pub concept_antonyms: Vec<String>,
}

impl Wordlists {
    pub fn for_strategy(&self, s: InitStrategy) -> Option<&[String]> {
        match s {
            InitStrategy::Random => None,
            InitStrategy::CorpusVocab => Some(&self.corpus_vocab),
            InitStrategy::UserVocab => Some(&self.user_vocab),
            InitStrategy::UserConcepts => Some(&self.user_concepts),
            InitStrategy::ConceptAntonyms => Some(&self.concept_antonyms),
        }
    }
}

/// An `[L × d_model]` block prepended to a user's inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt {
    pub user_id: String,
    pub init_strategy: InitStrategy,
    /// Digest of the base checkpoint this prompt was tuned against.
    pub base_digest: String,
    pub matrix: Tensor<f32>,
}

impl SoftPrompt {
    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parameter_count(&self) -> usize {
        self.matrix.len()
    }
}

/// Mean of the character embeddings of `word`.
pub fn word_embedding(model: &Model, word: &str) -> Result<Vec<f32>> {
    let vocab = Vocab::default();
    let wte = model.token_embeddings();
    let d = model.config().d_model;
    let ids: Vec<usize> = word.chars().filter_map(|c| vocab.char_id(c)).collect();
    if ids.is_empty() {
        return Err(CoreError::InvalidArgument(format!(
            "word {word:?} has no representable characters"
        )));
    }
    let mut acc = vec![0.0f64; d];
    for &id in &ids {
        for (a, &v) in acc.iter_mut().zip(wte.row(id)) {
            *a += v as f64;
        }
    }
    Ok(acc.iter().map(|a| (a / ids.len() as f64) as f32).collect())
}

/// Builds an initial prompt of `len` rows.
///
/// `Random` draws i.i.d. N(0, (0.5·rms(wte))²). Word strategies give each row
/// the [`word_embedding`] of one word: a seeded sample without replacement
/// when the list is long enough, with replacement otherwise.
pub fn init_soft_prompt(
    strategy: InitStrategy,
    len: usize,
    model: &Model,
    wordlists: &Wordlists,
    seed: u64,
    user_id: &str,
) -> Result<SoftPrompt> {
    if len == 0 {
        return Err(CoreError::InvalidArgument("prompt length must be ≥ 1".into()));
    }
    let d = model.config().d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = match wordlists.for_strategy(strategy) {
        None => {
            let std = 0.5 * model.token_embeddings().rms() as f64;
            let normal = Normal::new(0.0, std.max(f64::MIN_POSITIVE))
                .map_err(|e| CoreError::InvalidArgument(e.to_string()))?;
            (0..len * d).map(|_| normal.sample(&mut rng) as f32).collect()
        }
        Some([]) => {
            return Err(CoreError::EmptyInput("wordlist for prompt initialization"));
        }
        Some(words) => {
            let picked: Vec<&String> = if words.len() >= len {
                words.choose_multiple(&mut rng, len).collect()
            } else {
                (0..len).map(|_| &words[rng.gen_range(0..words.len())]).collect()
            };
            let mut data = Vec::with_capacity(len * d);
            for w in picked {
                data.extend(word_embedding(model, w)?);
            }
            data
        }
    };
    Ok(SoftPrompt {
        user_id: user_id.to_string(),
        init_strategy: strategy,
        base_digest: model.digest(),
        matrix: Tensor::new(vec![len, d], data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::init(
            ModelConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ffn: 8,
                max_context: 16,
                ..Default::default()
            },
            2,
        )
        .unwrap()
    }

    #[test]
    fn random_is_seed_deterministic_with_expected_shape() {
        let m = model();
        let w = Wordlists::default();
        let a = init_soft_prompt(InitStrategy::Random, 10, &m, &w, 7, "u").unwrap();
        let b = init_soft_prompt(InitStrategy::Random, 10, &m, &w, 7, "u").unwrap();
        assert_eq!(a.matrix.shape(), &[10, 8]);
        assert_eq!(a, b);
        assert_eq!(a.parameter_count(), 80);
        assert_eq!(a.base_digest, m.digest());
    }

    #[test]
    fn repeated_word_gives_identical_rows() {
        let m = model();
        let w = Wordlists {
            user_concepts: vec!["robin".into(); 4],
            ..Default::default()
        };
        let p = init_soft_prompt(InitStrategy::UserConcepts, 4, &m, &w, 1, "u").unwrap();
        for r in 1..4 {
            assert_eq!(p.matrix.row(r), p.matrix.row(0));
        }
    }

    #[test]
    fn empty_wordlist_is_an_error() {
        let m = model();
        assert!(init_soft_prompt(InitStrategy::UserVocab, 3, &m, &Wordlists::default(), 1, "u").is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in InitStrategy::ALL {
            assert_eq!(s.as_str().parse::<InitStrategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
    }
}

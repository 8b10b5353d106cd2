//! Training sequences and batch order.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_example, AbbrevExample, EncodedSequence};
use crate::error::{CoreError, Result};
use crate::retrieval::{build_fewshot_prompt, RetrievalIndex};
use crate::text::{Vocab, EOS};

/// Epoch-wise shuffled order over `n` items: every item is visited once per
/// epoch, and the order depends only on the seed.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(CoreError::EmptyInput("training examples"));
        }
        Ok(Self {
            order: (0..n).collect(),
            cursor: n,
        })
    }

    pub fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// How base training dresses up its pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMix {
    /// Share of plain sequences that carry their conversational context.
    pub context_rate: f64,
    /// Share of sequences framed as few-shot prompts over the same speaker's
    /// other examples.
    pub fewshot_rate: f64,
    /// Of the few-shot sequences, the share using retrieved rather than
    /// random demonstrations.
    pub retrieved_rate: f64,
    pub shots: usize,
}

impl SequenceMix {
    /// Bare `<abbr> … <sep> expansion` pairs only.
    pub fn plain() -> Self {
        Self {
            context_rate: 0.0,
            fewshot_rate: 0.0,
            retrieved_rate: 0.0,
            shots: 0,
        }
    }
}

impl Default for SequenceMix {
    fn default() -> Self {
        Self::plain()
    }
}

/// `demos` (nearest first) laid out as a few-shot prompt, then the target
/// expansion; loss covers the target expansion and its `<eos>`.
pub fn fewshot_sequence(
    demos: &[&AbbrevExample],
    target: &AbbrevExample,
    max_context: usize,
) -> Result<EncodedSequence> {
    let vocab = Vocab::default();
    let expansion = vocab.encode_str(&target.expansion)?;
    let budget = max_context.saturating_sub(expansion.len() + 1);
    let prompt = build_fewshot_prompt(demos, &target.abbreviation, budget)?;
    let prefix = prompt.token_ids.len();
    let mut token_ids = prompt.token_ids;
    token_ids.extend(&expansion);
    token_ids.push(EOS);
    let loss_mask = (0..token_ids.len()).map(|i| i >= prefix).collect();
    Ok(EncodedSequence {
        token_ids,
        loss_mask,
        lengths: (0, target.abbreviation.chars().count(), expansion.len()),
    })
}

/// Turns examples into training sequences according to a [`SequenceMix`].
pub struct SequenceSource<'a> {
    examples: &'a [AbbrevExample],
    mix: SequenceMix,
    max_len: usize,
    /// Per-speaker history and, for each example, (speaker, position in it).
    speakers: Vec<(RetrievalIndex, Vec<usize>)>,
    home: Vec<(usize, usize)>,
}

impl<'a> SequenceSource<'a> {
    /// `max_len` bounds the token length of every produced sequence.
    pub fn new(examples: &'a [AbbrevExample], mix: SequenceMix, max_len: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(CoreError::EmptyInput("training examples"));
        }
        for (name, r) in [
            ("context_rate", mix.context_rate),
            ("fewshot_rate", mix.fewshot_rate),
            ("retrieved_rate", mix.retrieved_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(CoreError::InvalidConfig(format!("{name} {r} outside [0, 1]")));
            }
        }
        let mut speakers: Vec<(RetrievalIndex, Vec<usize>)> = Vec::new();
        let mut home = Vec::with_capacity(examples.len());
        if mix.fewshot_rate > 0.0 {
            let mut by_name: HashMap<&str, usize> = HashMap::new();
            for (i, ex) in examples.iter().enumerate() {
                let s = *by_name.entry(&ex.speaker_id).or_insert_with(|| {
                    speakers.push((RetrievalIndex::default(), Vec::new()));
                    speakers.len() - 1
                });
                let (index, members) = &mut speakers[s];
                home.push((s, members.len()));
                index.insert(ex.clone())?;
                members.push(i);
            }
        }
        Ok(Self {
            examples,
            mix,
            max_len,
            speakers,
            home,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[AbbrevExample] {
        self.examples
    }

    fn demos(&self, i: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&AbbrevExample>> {
        let (s, own) = self.home[i];
        let (index, members) = &self.speakers[s];
        let k = self.mix.shots;
        if rng.gen_bool(self.mix.retrieved_rate) {
            let hits = index.search(&self.examples[i].abbreviation, k + 1)?;
            Ok(hits
                .into_iter()
                .filter(|h| h.position != own)
                .take(k)
                .map(|h| h.example)
                .collect())
        } else {
            let others: Vec<usize> = (0..members.len()).filter(|&p| p != own).collect();
            Ok(others
                .choose_multiple(rng, k.min(others.len()))
                .map(|&p| &index.entries()[p].example)
                .collect())
        }
    }

    /// Sequence for example `i`; the draws it makes come from `rng`.
    pub fn sequence(&self, i: usize, rng: &mut ChaCha8Rng) -> Result<EncodedSequence> {
        let ex = &self.examples[i];
        if self.mix.fewshot_rate > 0.0 && self.mix.shots > 0 && rng.gen_bool(self.mix.fewshot_rate) {
            let demos = self.demos(i, rng)?;
            if !demos.is_empty() {
                match fewshot_sequence(&demos, ex, self.max_len) {
                    Ok(seq) => return Ok(seq),
                    Err(CoreError::ContextOverflow { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        let with_context = self.mix.context_rate > 0.0 && rng.gen_bool(self.mix.context_rate);
        match encode_example(ex, with_context, self.max_len) {
            Err(CoreError::ContextOverflow { .. }) if with_context => {
                encode_example(ex, false, self.max_len)
            }
            other => other,
        }
    }
}

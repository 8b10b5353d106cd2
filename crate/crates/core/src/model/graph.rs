//! Recording the transformer onto an autodiff tape.
//!
//! Sequences are packed row-wise into one `[N × d]` activation matrix and
//! attention is confined to each sequence's [`Segment`]. Soft-prompt slots are
//! addressed as extra embedding rows: id `vocab_size + i` is prompt row `i`.

use std::sync::Arc;

use abbrex_numerics::{Segment, Tape, Tensor, Var};
use rand::Rng;

use super::{head_w, lnf_g, LayerIdx, Model, ModelConfig, LN_EPS, WPE, WTE, WWE};
use crate::error::{CoreError, Result};
use crate::text::{Vocab, SPACE};

/// One input position: a vocabulary token or a soft-prompt row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Token(usize),
    Prompt(usize),
}

impl Slot {
    /// Row in the embedding table extended by the prompt block.
    pub fn row(self, vocab_size: usize) -> usize {
        match self {
            Slot::Token(t) => t,
            Slot::Prompt(i) => vocab_size + i,
        }
    }
}

/// `[rows × vocab]` next-token logits.
pub type Logits = Tensor<f32>;

/// The prompt slots followed by the tokens.
pub fn prompted(prompt_len: usize, tokens: &[usize]) -> Vec<Slot> {
    (0..prompt_len)
        .map(Slot::Prompt)
        .chain(tokens.iter().map(|&t| Slot::Token(t)))
        .collect()
}

/// Running word ordinal: spaces seen since the last control token, capped
/// at `max_words - 1`. It gives the k-th abbreviation letter and the k-th
/// expansion word the same embedding, so copying a letter is a lookup rather
/// than something learned by counting positions.
#[derive(Clone, Copy, Debug)]
pub struct WordOrdinals {
    count: usize,
    cap: usize,
}

impl WordOrdinals {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            count: 0,
            cap: cfg.max_words - 1,
        }
    }

    pub fn next(&mut self, token: usize) -> usize {
        if Vocab::is_control(token) {
            self.count = 0;
        } else if token == SPACE {
            self.count += 1;
        }
        self.count.min(self.cap)
    }
}

/// Packed, position-annotated rows for a batch of sequences.
///
/// Soft-prompt rows are prepended to the embedded text: they get no position
/// or ordinal embedding, and the text's positions start at 0 as they would
/// without a prompt. Their `positions`/`ordinals` entries point one past the
/// learned tables, at the zero row [`embed`] appends.
#[derive(Clone, Debug)]
pub struct Packed {
    pub rows: Vec<usize>,
    pub positions: Vec<usize>,
    pub ordinals: Vec<usize>,
    pub segments: Arc<[Segment]>,
}

impl Packed {
    pub fn new(cfg: &ModelConfig, prompt_len: usize, seqs: &[Vec<Slot>]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut ordinals = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for seq in seqs {
            check_slots(cfg, prompt_len, seq)?;
            segments.push(Segment {
                start: rows.len(),
                len: seq.len(),
            });
            rows.extend(seq.iter().map(|s| s.row(cfg.vocab_size)));
            let mut words = WordOrdinals::new(cfg);
            let mut text = 0;
            for &s in seq {
                match s {
                    Slot::Prompt(_) => {
                        positions.push(cfg.max_context);
                        ordinals.push(cfg.max_words);
                    }
                    Slot::Token(t) => {
                        positions.push(text);
                        ordinals.push(words.next(t));
                        text += 1;
                    }
                }
            }
        }
        Ok(Self {
            rows,
            positions,
            ordinals,
            segments: segments.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub(crate) fn check_slots(cfg: &ModelConfig, prompt_len: usize, seq: &[Slot]) -> Result<()> {
    if seq.is_empty() {
        return Err(CoreError::EmptyInput("token sequence"));
    }
    if seq.len() > cfg.max_context {
        return Err(CoreError::ContextOverflow {
            len: seq.len(),
            limit: cfg.max_context,
        });
    }
    for s in seq {
        match *s {
            Slot::Token(t) if t >= cfg.vocab_size => {
                return Err(CoreError::UnknownToken {
                    id: t,
                    vocab: cfg.vocab_size,
                })
            }
            Slot::Prompt(i) if i >= prompt_len => {
                return Err(CoreError::InvalidArgument(format!(
                    "prompt slot {i} but prompt has {prompt_len} rows"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Places every model tensor on the tape, as parameters or constants.
pub fn bind_params(tape: &mut Tape<f32>, model: &Model, trainable: bool) -> Result<Vec<Var>> {
    model
        .params()
        .iter()
        .map(|p| Ok(tape.leaf(p.clone(), trainable)?))
        .collect()
}

/// Optional dropout source for training-time graphs.
pub struct Dropout<'r, R: Rng> {
    pub p: f64,
    pub rng: &'r mut R,
}

fn drop<R: Rng>(tape: &mut Tape<f32>, x: Var, dropout: &mut Option<Dropout<'_, R>>) -> Result<Var> {
    match dropout {
        Some(d) if d.p > 0.0 => Ok(tape.dropout(x, d.p, d.rng)?),
        _ => Ok(x),
    }
}

/// Token (or prompt) embeddings plus learned positions and word ordinals.
pub fn embed(
    tape: &mut Tape<f32>,
    params: &[Var],
    prompt: Option<Var>,
    packed: &Packed,
) -> Result<Var> {
    let (table, wpe, wwe) = match prompt {
        Some(p) => {
            let d = tape.value(params[WPE]).shape()[1];
            let zero = tape.constant(Tensor::zeros(&[1, d]))?;
            (
                tape.concat_rows(&[params[WTE], p])?,
                tape.concat_rows(&[params[WPE], zero])?,
                tape.concat_rows(&[params[WWE], zero])?,
            )
        }
        None => (params[WTE], params[WPE], params[WWE]),
    };
    let tok = tape.gather_rows(table, &packed.rows)?;
    let pos = tape.gather_rows(wpe, &packed.positions)?;
    let word = tape.gather_rows(wwe, &packed.ordinals)?;
    let x = tape.add(tok, pos)?;
    Ok(tape.add(x, word)?)
}

/// Transformer blocks and the final layer norm over embedded rows `x`.
pub fn blocks<R: Rng>(
    tape: &mut Tape<f32>,
    cfg: &ModelConfig,
    params: &[Var],
    x: Var,
    segments: Arc<[Segment]>,
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<Var> {
    let mut x = drop(tape, x, &mut dropout)?;
    for l in 0..cfg.n_layers {
        let i = LayerIdx::of(l);
        let h = tape.layer_norm(x, params[i.ln1_g], params[i.ln1_b], LN_EPS)?;
        let qkv = tape.matmul(h, params[i.qkv_w])?;
        let qkv = tape.add_bias(qkv, params[i.qkv_b])?;
        let a = tape.causal_attention(qkv, segments.clone(), cfg.n_heads)?;
        let a = tape.matmul(a, params[i.proj_w])?;
        let a = tape.add_bias(a, params[i.proj_b])?;
        let a = drop(tape, a, &mut dropout)?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, params[i.ln2_g], params[i.ln2_b], LN_EPS)?;
        let f = tape.matmul(h, params[i.fc_w])?;
        let f = tape.add_bias(f, params[i.fc_b])?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, params[i.out_w])?;
        let f = tape.add_bias(f, params[i.out_b])?;
        let f = drop(tape, f, &mut dropout)?;
        x = tape.add(x, f)?;
    }
    let g = lnf_g(cfg);
    Ok(tape.layer_norm(x, params[g], params[g + 1], LN_EPS)?)
}

/// Output projection of final hidden states.
pub fn head(tape: &mut Tape<f32>, cfg: &ModelConfig, params: &[Var], h: Var) -> Result<Var> {
    Ok(tape.matmul(h, params[head_w(cfg)])?)
}

/// Full-graph logits for every packed row.
pub fn logits<R: Rng>(
    tape: &mut Tape<f32>,
    model: &Model,
    params: &[Var],
    prompt: Option<Var>,
    packed: &Packed,
    dropout: Option<Dropout<'_, R>>,
) -> Result<Var> {
    let cfg = model.config();
    let x = embed(tape, params, prompt, packed)?;
    let h = blocks(tape, cfg, params, x, packed.segments.clone(), dropout)?;
    head(tape, cfg, params, h)
}

/// Logits for `tokens`, optionally preceded by a soft prompt.
///
/// Returns `(L+T) × V` when a prompt of `L` rows is supplied; the first `L`
/// rows belong to prompt positions and are not meaningful predictions.
pub fn forward(model: &Model, tokens: &[usize], prompt: Option<&Tensor<f32>>) -> Result<Logits> {
    let cfg = model.config();
    let prompt_len = match prompt {
        Some(p) => check_prompt_shape(cfg, p)?,
        None => 0,
    };
    if tokens.len() + prompt_len > cfg.max_context {
        return Err(CoreError::ContextOverflow {
            len: tokens.len() + prompt_len,
            limit: cfg.max_context,
        });
    }
    let packed = Packed::new(cfg, prompt_len, &[prompted(prompt_len, tokens)])?;
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, model, false)?;
    let pvar = prompt.map(|p| tape.constant(p.clone())).transpose()?;
    let out = logits::<rand::rngs::ThreadRng>(&mut tape, model, &params, pvar, &packed, None)?;
    Ok(tape.value(out).clone())
}

/// Returns the prompt length after checking the `[L × d]` shape.
pub(crate) fn check_prompt_shape(cfg: &ModelConfig, p: &Tensor<f32>) -> Result<usize> {
    match p.shape() {
        [l, d] if *d == cfg.d_model && *l >= 1 => Ok(*l),
        other => Err(CoreError::InvalidArgument(format!(
            "soft prompt shape {other:?} incompatible with d_model {}",
            cfg.d_model
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{BOS, EOS};

    fn tiny() -> Model {
        Model::init(
            ModelConfig {
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                d_ffn: 24,
                max_context: 20,
                ..Default::default()
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn single_bos_gives_one_row() {
        let m = tiny();
        let out = forward(&m, &[BOS], None).unwrap();
        assert_eq!(out.shape(), &[1, 64]);
    }

    #[test]
    fn causal_positions_ignore_the_future() {
        let m = tiny();
        let base: Vec<usize> = vec![BOS, 10, 11, 12, 13, 14, EOS];
        let a = forward(&m, &base, None).unwrap();
        for t in 0..base.len() {
            let mut pert = base.clone();
            pert[t] = 40;
            let b = forward(&m, &pert, None).unwrap();
            for r in 0..base.len() {
                let same = a.row(r) == b.row(r);
                assert_eq!(same, r < t, "row {r} perturbed at {t}");
            }
        }
    }

    #[test]
    fn errors_name_the_problem() {
        let m = tiny();
        assert!(matches!(
            forward(&m, &[BOS, 99], None),
            Err(CoreError::UnknownToken { id: 99, .. })
        ));
        let long = vec![BOS; 18];
        let prompt = Tensor::zeros(&[4, 16]);
        assert!(matches!(
            forward(&m, &long, Some(&prompt)),
            Err(CoreError::ContextOverflow { len: 22, limit: 20 })
        ));
    }

    #[test]
    fn packed_sequences_do_not_interact() {
        let m = tiny();
        let s1 = vec![BOS, 10, 11];
        let s2 = vec![BOS, 20, 21, 22];
        let packed = Packed::new(
            m.config(),
            0,
            &[prompted(0, &s1), prompted(0, &s2)],
        )
        .unwrap();
        let mut tape = Tape::new();
        let params = bind_params(&mut tape, &m, false).unwrap();
        let out = logits::<rand::rngs::ThreadRng>(&mut tape, &m, &params, None, &packed, None).unwrap();
        let joint = tape.value(out);
        let a = forward(&m, &s1, None).unwrap();
        let b = forward(&m, &s2, None).unwrap();
        for r in 0..3 {
            assert_eq!(joint.row(r), a.row(r));
        }
        for r in 0..4 {
            assert_eq!(joint.row(3 + r), b.row(r));
        }
    }
}

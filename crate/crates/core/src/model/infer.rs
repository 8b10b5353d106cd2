//! Incremental inference with a key/value cache.
//!
//! Uses the same kernels, in the same order, as the tape forward pass, so
//! cached decoding reproduces full-graph logits.

use abbrex_numerics::kernels;
use abbrex_numerics::Tensor;

use super::graph::{check_prompt_shape, check_slots, Slot, WordOrdinals};
use super::{head_w, lnf_g, LayerIdx, Model, LN_EPS, WPE, WTE, WWE};
use crate::error::{CoreError, Result};

/// Decoding state for one sequence. Cloning forks the cache, which is how
/// samples that share a prefix split off from each other.
#[derive(Clone)]
pub struct Session<'m> {
    model: &'m Model,
    prompt: Option<&'m Tensor<f32>>,
    prompt_len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    /// Token positions consumed; prompt rows carry no position.
    text_len: usize,
    words: WordOrdinals,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, prompt: Option<&'m Tensor<f32>>) -> Result<Self> {
        let cfg = model.config();
        let prompt_len = match prompt {
            Some(p) => check_prompt_shape(cfg, p)?,
            None => 0,
        };
        Ok(Self {
            model,
            prompt,
            prompt_len,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
            text_len: 0,
            words: WordOrdinals::new(cfg),
        })
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Room left before the context limit.
    pub fn remaining(&self) -> usize {
        self.model.config().max_context - self.len
    }

    /// Feeds `slots` and returns logits for every new row (`m × V`).
    pub fn extend(&mut self, slots: &[Slot]) -> Result<Tensor<f32>> {
        let m = slots.len();
        let v = self.model.config().vocab_size;
        let data = self.run(slots, false)?;
        Ok(Tensor::new(vec![m, v], data)?)
    }

    /// Feeds `slots` and returns only the last row's logits.
    pub fn extend_last(&mut self, slots: &[Slot]) -> Result<Vec<f32>> {
        self.run(slots, true)
    }

    fn run(&mut self, slots: &[Slot], last_only: bool) -> Result<Vec<f32>> {
        let cfg = self.model.config();
        if slots.is_empty() {
            return Err(CoreError::EmptyInput("session extension"));
        }
        if self.len + slots.len() > cfg.max_context {
            return Err(CoreError::ContextOverflow {
                len: self.len + slots.len(),
                limit: cfg.max_context,
            });
        }
        check_slots(cfg, self.prompt_len, slots)?;
        let p = self.model.params();
        let (d, f, nh) = (cfg.d_model, cfg.d_ffn, cfg.n_heads);
        let hd = cfg.head_dim();
        let m = slots.len();
        let start = self.len;

        let mut x = vec![0.0f32; m * d];
        for (j, s) in slots.iter().enumerate() {
            let row = &mut x[j * d..(j + 1) * d];
            match *s {
                Slot::Prompt(i) => row.copy_from_slice(self.prompt.expect("checked").row(i)),
                Slot::Token(t) => {
                    row.copy_from_slice(p[WTE].row(t));
                    for (r, &e) in row.iter_mut().zip(p[WPE].row(self.text_len)) {
                        *r += e;
                    }
                    for (r, &e) in row.iter_mut().zip(p[WWE].row(self.words.next(t))) {
                        *r += e;
                    }
                    self.text_len += 1;
                }
            }
        }

        let scale = 1.0 / (hd as f32).sqrt();
        let mut h = vec![0.0f32; m * d];
        let mut qkv = vec![0.0f32; m * 3 * d];
        let mut att = vec![0.0f32; m * d];
        let mut proj = vec![0.0f32; m * d];
        let mut ff = vec![0.0f32; m * f];
        let mut scores = vec![0.0f32; start + m];
        for l in 0..cfg.n_layers {
            let i = LayerIdx::of(l);
            kernels::layer_norm_rows(&x, p[i.ln1_g].data(), p[i.ln1_b].data(), LN_EPS, &mut h, None);
            kernels::matmul(&h, p[i.qkv_w].data(), &mut qkv, m, d, 3 * d);
            add_bias(&mut qkv, p[i.qkv_b].data());
            let (keys, values) = (&mut self.keys[l], &mut self.values[l]);
            for j in 0..m {
                let r = &qkv[j * 3 * d..(j + 1) * 3 * d];
                keys.extend_from_slice(&r[d..2 * d]);
                values.extend_from_slice(&r[2 * d..]);
            }
            att.iter_mut().for_each(|a| *a = 0.0);
            for j in 0..m {
                let visible = start + j + 1;
                for hh in 0..nh {
                    let q = &qkv[j * 3 * d + hh * hd..j * 3 * d + (hh + 1) * hd];
                    let sc = &mut scores[..visible];
                    for (s, o) in sc.iter_mut().enumerate() {
                        *o = kernels::dot(q, &keys[s * d + hh * hd..s * d + (hh + 1) * hd]) * scale;
                    }
                    kernels::softmax_in_place(sc);
                    let out = &mut att[j * d + hh * hd..j * d + (hh + 1) * hd];
                    for (s, &w) in sc.iter().enumerate() {
                        kernels::axpy(w, &values[s * d + hh * hd..s * d + (hh + 1) * hd], out);
                    }
                }
            }
            kernels::matmul(&att, p[i.proj_w].data(), &mut proj, m, d, d);
            add_bias(&mut proj, p[i.proj_b].data());
            add_into(&mut x, &proj);
            kernels::layer_norm_rows(&x, p[i.ln2_g].data(), p[i.ln2_b].data(), LN_EPS, &mut h, None);
            kernels::matmul(&h, p[i.fc_w].data(), &mut ff, m, d, f);
            add_bias(&mut ff, p[i.fc_b].data());
            ff.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            kernels::matmul(&ff, p[i.out_w].data(), &mut proj, m, f, d);
            add_bias(&mut proj, p[i.out_b].data());
            add_into(&mut x, &proj);
        }
        self.len += m;

        let rows = if last_only { &x[(m - 1) * d..] } else { &x[..] };
        let r = rows.len() / d;
        let g = lnf_g(cfg);
        let mut hf = vec![0.0f32; r * d];
        kernels::layer_norm_rows(rows, p[g].data(), p[g + 1].data(), LN_EPS, &mut hf, None);
        let v = cfg.vocab_size;
        let mut logits = vec![0.0f32; r * v];
        kernels::matmul(&hf, p[head_w(cfg)].data(), &mut logits, r, d, v);
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(abbrex_numerics::NumericsError::NonFinite { op: "inference" }.into());
        }
        Ok(logits)
    }
}

fn add_bias(x: &mut [f32], b: &[f32]) {
    for row in x.chunks_exact_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn add_into(x: &mut [f32], y: &[f32]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

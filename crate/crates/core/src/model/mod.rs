//! Decoder-only character transformer.
//!
//! Pre-norm GPT layout: learned token and position embeddings, `n_layers`
//! blocks of causal multi-head attention and a GELU MLP, final layer norm,
//! untied output projection.

pub mod checkpoint;
pub mod graph;
pub mod infer;
pub mod soft_prompt;

use abbrex_numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::text::Vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{forward, Logits, Slot};
pub use infer::Session;
pub use soft_prompt::{init_soft_prompt, word_embedding, InitStrategy, SoftPrompt, Wordlists};

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// Maximum number of positions (characters plus soft-prompt slots).
    pub max_context: usize,
    /// Rows of the word-ordinal embedding; later words share the last row.
    #[serde(default = "default_max_words")]
    pub max_words: usize,
    pub dropout: f64,
}

fn default_max_words() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocab::default().size(),
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 512,
            max_context: 512,
            max_words: default_max_words(),
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return bad("dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_context == 0 || self.max_words == 0 {
            return bad("max_context and max_words must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count of the architecture.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f, c, w) = (self.vocab_size, self.d_model, self.d_ffn, self.max_context, self.max_words);
        let per_layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d);
        v * d + c * d + w * d + self.n_layers * per_layer + 2 * d + d * v
    }
}

pub(crate) const WTE: usize = 0;
pub(crate) const WPE: usize = 1;
pub(crate) const WWE: usize = 2;
const EMBEDDINGS: usize = 3;
pub(crate) const PER_LAYER: usize = 12;

/// Offsets of one block's tensors within the parameter list.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

impl LayerIdx {
    pub fn of(layer: usize) -> Self {
        let b = EMBEDDINGS + layer * PER_LAYER;
        Self {
            ln1_g: b,
            ln1_b: b + 1,
            qkv_w: b + 2,
            qkv_b: b + 3,
            proj_w: b + 4,
            proj_b: b + 5,
            ln2_g: b + 6,
            ln2_b: b + 7,
            fc_w: b + 8,
            fc_b: b + 9,
            out_w: b + 10,
            out_b: b + 11,
        }
    }
}

pub(crate) fn lnf_g(cfg: &ModelConfig) -> usize {
    EMBEDDINGS + cfg.n_layers * PER_LAYER
}

pub(crate) fn head_w(cfg: &ModelConfig) -> usize {
    EMBEDDINGS + cfg.n_layers * PER_LAYER + 2
}

/// Canonical (name, shape) list of every parameter tensor, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ffn);
    let mut specs = vec![
        ("wte".to_string(), vec![v, d]),
        ("wpe".to_string(), vec![cfg.max_context, d]),
        ("wwe".to_string(), vec![cfg.max_words, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("h{l}.{s}");
        specs.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.qkv.w"), vec![d, 3 * d]),
            (p("attn.qkv.b"), vec![3 * d]),
            (p("attn.proj.w"), vec![d, d]),
            (p("attn.proj.b"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.fc.w"), vec![d, f]),
            (p("mlp.fc.b"), vec![f]),
            (p("mlp.proj.w"), vec![f, d]),
            (p("mlp.proj.b"), vec![d]),
        ]);
    }
    specs.extend([
        ("lnf.g".to_string(), vec![d]),
        ("lnf.b".to_string(), vec![d]),
        ("head.w".to_string(), vec![d, v]),
    ]);
    specs
}

/// Configuration plus parameter tensors in [`param_specs`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor<f32>>,
}

impl Model {
    /// Random initialization: N(0, 0.02) weights, residual projections scaled
    /// by 1/√(2·n_layers), unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let params = param_specs(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = if name.ends_with(".g") {
                    vec![1.0; n]
                } else if name.ends_with(".b") {
                    vec![0.0; n]
                } else {
                    let s = if name.ends_with("proj.w") { resid_std } else { std };
                    let normal = Normal::new(0.0, s).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
                };
                Tensor::new(shape, data).expect("declared shape")
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Assembles a model from named tensors, checking names and shapes
    /// against the configuration.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != named.len() {
            return Err(CoreError::Corrupt(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, shape), (got_name, tensor)) in specs.into_iter().zip(named) {
            if name != got_name || shape != tensor.shape() {
                return Err(CoreError::Corrupt(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    tensor.shape()
                )));
            }
            params.push(tensor);
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor<f32>)> {
        param_specs(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.params.iter())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn token_embeddings(&self) -> &Tensor<f32> {
        &self.params[WTE]
    }

    /// SHA-256 (hex) of the canonical checkpoint serialization.
    pub fn digest(&self) -> String {
        checkpoint::model_digest(self)
    }
}

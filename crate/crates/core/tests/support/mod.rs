//! Shared fixtures for the integration tests.

#![allow(dead_code)]

pub mod bleu_ref;
pub mod knn_ref;

use abbrex_core::corpus::synthetic::{dialog_corpus, PersonaParams};
use abbrex_core::corpus::{AbbrevExample, SplitPolicy, SplitSet};
use abbrex_core::model::{Model, ModelConfig};
use abbrex_core::tuning::{finetune_user, TrainConfig};
use abbrex_numerics::LrSchedule;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ffn: 64,
        max_context: 96,
        ..Default::default()
    }
}

/// `n` short dialog sentences from a fixed generator.
pub fn pairs(n: usize, seed: u64) -> Vec<AbbrevExample> {
    let c = dialog_corpus(seed, 4, n, &PersonaParams::default());
    c.examples
}

pub fn split_of(train: Vec<AbbrevExample>, val: Vec<AbbrevExample>) -> SplitSet {
    let sizes = [train.len(), val.len(), 0];
    SplitSet {
        train,
        val,
        test: vec![],
        policy: SplitPolicy {
            ratios: [1.0, 0.0, 0.0],
            dedup_val_test: false,
            max_abbrev_len: None,
            pre_filter: sizes,
        },
    }
}

/// Full-batch memorization config at a constant `lr`.
pub fn overfit_config(lr: f64, steps: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        max_steps: steps,
        schedule: LrSchedule::constant(lr),
        eval_every: 100.min(steps),
        early_stop_patience: 3,
        seed: 1,
        eval_samples: 4,
        ..TrainConfig::finetune(lr)
    }
}

/// A tiny model that has memorized `train`.
pub fn memorized(train: &[AbbrevExample]) -> Model {
    let init = Model::init(tiny_config(), 11).unwrap();
    let split = split_of(train.to_vec(), train.to_vec());
    let (m, _) = finetune_user(&init, &split, &overfit_config(0.01, 1500, 16)).unwrap();
    m
}

/// A tiny model trained on 400 pairs: fluent rather than a lookup table, so
/// a soft prompt can steer it. Returns the model and the unseen remainder.
pub fn fluent() -> (Model, Vec<AbbrevExample>) {
    let data = pairs(460, 6);
    let init = Model::init(tiny_config(), 11).unwrap();
    let split = split_of(data[..400].to_vec(), data[400..416].to_vec());
    let (m, _) = finetune_user(&init, &split, &overfit_config(0.01, 1500, 16)).unwrap();
    (m, data[416..].to_vec())
}

//! Sampling, ranking and scoring of expansions.

pub mod decode;
pub mod metrics;
pub mod strategy;

pub use decode::{
    sample_expansions, sample_one, sample_outcomes, tally, top_k, Candidate, DecodeConfig,
    DecodeResult, SampleOutcome,
};
pub use metrics::{
    accuracy_at_k, bleu_at_k, length_report_csv, length_sliced_report, personalization_benefit,
    sentence_bleu, Benefit, EvalRow, LengthBucket, TOP_K,
};
pub use strategy::{evaluate, expand, Conditioning, Expansion, Strategy};

//! Personalized abbreviation expansion with a character-level transformer.
//!
//! Text is abbreviated to word-initial characters ([`corpus::abbreviate`]) and
//! a small decoder-only model learns to expand it back. Personalization comes
//! in three forms: full fine-tuning, soft-prompt tuning against a frozen base,
//! and retrieval-augmented few-shot prompting over a user's history.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod retrieval;
pub mod text;
pub mod tuning;

pub use error::{CoreError, Result};

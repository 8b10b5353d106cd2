//! Service, CLI and benchmarks on top of `abbrex-core`.

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod registry;
pub mod service;

pub use error::{AppError, Result};

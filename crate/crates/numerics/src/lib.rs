//! Numerical substrate for the abbreviation-expansion models.
//!
//! Everything here is generic over [`Scalar`] so that training and inference
//! run in `f32` while gradient checks run the very same code in `f64`.

pub mod error;
pub mod kernels;
pub mod optim;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use optim::{
    adafactor_step, Adafactor, AdafactorConfig, Optimizer, OptimizerState, SecondMoment, Sgd,
};
pub use scalar::Scalar;
pub use schedule::LrSchedule;
pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::Tensor;

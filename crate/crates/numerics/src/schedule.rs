use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};

/// Learning rate as a function of the (0-based) optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        peak: f64,
    },
    /// Linear ramp from 0 to `peak` over `warmup_steps`, then linear decay to
    /// 0 at `total_steps`.
    WarmupLinearDecay {
        peak: f64,
        warmup_steps: u64,
        total_steps: u64,
    },
}

impl LrSchedule {
    pub fn constant(peak: f64) -> Self {
        LrSchedule::Constant { peak }
    }

    pub fn warmup_linear_decay(peak: f64, warmup_steps: u64, total_steps: u64) -> Self {
        LrSchedule::WarmupLinearDecay {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { peak } if peak > 0.0 && peak.is_finite() => Ok(()),
            LrSchedule::WarmupLinearDecay {
                peak,
                warmup_steps,
                total_steps,
            } if peak > 0.0 && peak.is_finite() && total_steps > warmup_steps => Ok(()),
            ref other => Err(NumericsError::InvalidArgument(format!(
                "invalid schedule {other:?}"
            ))),
        }
    }

    pub fn peak(&self) -> f64 {
        match *self {
            LrSchedule::Constant { peak } | LrSchedule::WarmupLinearDecay { peak, .. } => peak,
        }
    }

    /// Steps past `total_steps` clamp to 0 for the decaying schedule.
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { peak } => peak,
            LrSchedule::WarmupLinearDecay {
                peak,
                warmup_steps,
                total_steps,
            } => {
                if step >= total_steps {
                    0.0
                } else if step < warmup_steps {
                    peak * step as f64 / warmup_steps as f64
                } else {
                    peak * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64
                }
            }
        }
    }
}

//! Base training, user fine-tuning, soft-prompt tuning and sweeps.

mod data;
mod sweep;
mod train;

use abbrex_numerics::LrSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use data::{fewshot_sequence, BatchSampler, SequenceMix, SequenceSource};
pub use sweep::{sweep, CellSummary, MeanStd, SweepCell, SweepGrid, SweepReport, SweepRun, SweepSetup};
pub use train::{finetune_user, prompt_tune, train_base, train_step_loss};

/// Samples per validation expansion during training; final reports use the
/// full decode budget.
pub const EVAL_SAMPLES: usize = 16;
/// Evaluations without improvement before stopping.
pub const DEFAULT_PATIENCE: usize = 5;
/// Seeds behind every mean ± std.
pub const SWEEP_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    AllParams,
    SoftPromptOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// `0` returns the input unchanged.
    pub max_steps: usize,
    pub schedule: LrSchedule,
    pub eval_every: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub trainable_scope: TrainableScope,
    pub eval_samples: usize,
}

impl TrainConfig {
    /// Base training: constant 0.01.
    pub fn base() -> Self {
        Self {
            batch_size: 16,
            max_steps: 3000,
            schedule: LrSchedule::constant(0.01),
            eval_every: 250,
            early_stop_patience: DEFAULT_PATIENCE,
            seed: 1,
            trainable_scope: TrainableScope::AllParams,
            eval_samples: EVAL_SAMPLES,
        }
    }

    /// Full fine-tuning on one user's data at a constant `lr`.
    pub fn finetune(lr: f64) -> Self {
        Self {
            max_steps: 2000,
            schedule: LrSchedule::constant(lr),
            eval_every: 100,
            ..Self::base()
        }
    }

    /// Soft-prompt tuning: batch 16, 20k steps, linear warmup to 0.1 over
    /// 1000 steps then linear decay.
    pub fn prompt_tuning() -> Self {
        Self {
            batch_size: 16,
            max_steps: 20_000,
            schedule: LrSchedule::warmup_linear_decay(0.1, 1000, 20_000),
            eval_every: 500,
            trainable_scope: TrainableScope::SoftPromptOnly,
            ..Self::base()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be ≥ 1".into());
        }
        if self.max_steps > 0 && self.eval_every > self.max_steps {
            return bad(format!(
                "eval_every {} exceeds max_steps {}",
                self.eval_every, self.max_steps
            ));
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be ≥ 1".into());
        }
        self.schedule
            .validate()
            .map_err(|e| CoreError::InvalidConfig(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub accuracy: f64,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean masked cross-entropy of each optimizer step's batch.
    pub losses: Vec<f64>,
    /// Validation accuracy@5 / BLEU@5, including step 0.
    pub evals: Vec<EvalPoint>,
    /// Step whose weights were returned: the first to reach the best
    /// validation accuracy, BLEU breaking ties.
    pub selected_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
    /// Checkpoint digest, or soft-prompt container digest.
    pub digest: String,
}

impl TrainReport {
    pub fn best(&self) -> Option<&EvalPoint> {
        self.evals.iter().find(|e| e.step == self.selected_step)
    }

    /// Plain-text rendering of the evaluation series.
    pub fn table(&self) -> String {
        let mut s = String::from("step    acc@5   bleu@5\n");
        for e in &self.evals {
            let mark = if e.step == self.selected_step { " *" } else { "" };
            s.push_str(&format!("{:<7} {:>6.2} {:>8.2}{mark}\n", e.step, e.accuracy, e.bleu));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        assert_eq!(TrainConfig::base().schedule, LrSchedule::constant(0.01));
        let p = TrainConfig::prompt_tuning();
        assert_eq!((p.batch_size, p.max_steps), (16, 20_000));
        assert_eq!(p.schedule, LrSchedule::warmup_linear_decay(0.1, 1000, 20_000));
        assert_eq!(p.trainable_scope, TrainableScope::SoftPromptOnly);
        for c in [TrainConfig::base(), TrainConfig::finetune(5e-5), p] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs() {
        let ok = TrainConfig::base();
        for c in [
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { eval_every: 0, ..ok.clone() },
            TrainConfig { max_steps: 10, eval_every: 20, ..ok.clone() },
            TrainConfig { schedule: LrSchedule::constant(-1.0), ..ok.clone() },
        ] {
            assert!(matches!(c.validate(), Err(CoreError::InvalidConfig(_))));
        }
    }
}

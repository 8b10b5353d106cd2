use abbrex_numerics::LrSchedule;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::train::{finetune_user, prompt_tune};
use super::{TrainConfig, TrainReport};
use crate::corpus::SplitSet;
use crate::error::{CoreError, Result};
use crate::eval::{accuracy_at_k, bleu_at_k, evaluate, Conditioning, DecodeConfig};
use crate::model::{init_soft_prompt, InitStrategy, Model, Wordlists};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepGrid {
    /// Cartesian product of initializations, peak learning rates and prompt
    /// lengths.
    PromptTuning {
        strategies: Vec<InitStrategy>,
        lrs: Vec<f64>,
        lengths: Vec<usize>,
    },
    /// Full fine-tuning at each constant learning rate.
    FineTuning { lrs: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<InitStrategy>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<SweepCell> {
        match self {
            SweepGrid::PromptTuning {
                strategies,
                lrs,
                lengths,
            } => {
                let mut out = Vec::new();
                for &s in strategies {
                    for &lr in lrs {
                        for &len in lengths {
                            out.push(SweepCell {
                                strategy: Some(s),
                                lr,
                                length: Some(len),
                            });
                        }
                    }
                }
                out
            }
            SweepGrid::FineTuning { lrs } => lrs
                .iter()
                .map(|&lr| SweepCell {
                    strategy: None,
                    lr,
                    length: None,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub accuracy: f64,
    pub bleu: f64,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: SweepCell,
    pub accuracy: MeanStd,
    pub bleu: MeanStd,
    pub runs: Vec<SweepRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<CellSummary>,
}

impl SweepReport {
    /// One row per cell: validation accuracy@5 and BLEU@5 as mean ± std.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<18} {:>8} {:>6} {:>16} {:>16}\n",
            "init", "lr", "len", "acc@5", "bleu@5"
        );
        for c in &self.cells {
            s.push_str(&format!(
                "{:<18} {:>8} {:>6} {:>16} {:>16}\n",
                c.cell.strategy.map_or("-".to_string(), |k| k.to_string()),
                c.cell.lr,
                c.cell.length.map_or("-".to_string(), |l| l.to_string()),
                format!("{:.2} ± {:.2}", c.accuracy.mean, c.accuracy.std),
                format!("{:.2} ± {:.2}", c.bleu.mean, c.bleu.std),
            ));
        }
        s
    }
}

/// Everything a sweep holds fixed.
pub struct SweepSetup<'a> {
    pub base: &'a Model,
    pub split: &'a SplitSet,
    pub wordlists: &'a Wordlists,
    pub user_id: &'a str,
    /// Template for each run; the schedule's peak is replaced by the cell's lr.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Decode settings of the final validation scoring.
    pub decode: DecodeConfig,
}

fn with_peak(s: &LrSchedule, lr: f64) -> LrSchedule {
    match *s {
        LrSchedule::Constant { .. } => LrSchedule::constant(lr),
        LrSchedule::WarmupLinearDecay {
            warmup_steps,
            total_steps,
            ..
        } => LrSchedule::warmup_linear_decay(lr, warmup_steps, total_steps),
    }
}

/// Trains every cell once per seed and scores the selected weights on the
/// validation split. Cells run in grid order; the report is deterministic.
pub fn sweep(setup: &SweepSetup<'_>, grid: &SweepGrid) -> Result<SweepReport> {
    if setup.seeds.is_empty() {
        return Err(CoreError::InvalidConfig("sweep needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    for cell in grid.cells() {
        let mut runs = Vec::new();
        for &seed in &setup.seeds {
            let cfg = TrainConfig {
                schedule: with_peak(&setup.train.schedule, cell.lr),
                ..setup.train.with_seed(seed)
            };
            let decode = setup.decode.with_seed(seed);
            let (rows, report) = match (cell.strategy, cell.length) {
                (Some(strategy), Some(len)) => {
                    let init =
                        init_soft_prompt(strategy, len, setup.base, setup.wordlists, seed, setup.user_id)?;
                    let (p, report) = prompt_tune(setup.base, setup.split, &init, &cfg)?;
                    let cond = Conditioning::SoftPrompt(&p.matrix);
                    (evaluate(setup.base, cond, &setup.split.val, &decode)?, report)
                }
                _ => {
                    let (m, report) = finetune_user(setup.base, setup.split, &cfg)?;
                    (evaluate(&m, Conditioning::Plain, &setup.split.val, &decode)?, report)
                }
            };
            let run = SweepRun {
                seed,
                accuracy: accuracy_at_k(&rows)?,
                bleu: bleu_at_k(&rows)?,
                report,
            };
            info!(?cell, seed, accuracy = run.accuracy, "sweep run");
            runs.push(run);
        }
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let bleu: Vec<f64> = runs.iter().map(|r| r.bleu).collect();
        cells.push(CellSummary {
            cell,
            accuracy: MeanStd::of(&acc),
            bleu: MeanStd::of(&bleu),
            runs,
        });
    }
    Ok(SweepReport { cells })
}

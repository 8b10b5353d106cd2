use abbrex_numerics::{Adafactor, AdafactorConfig, Optimizer, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::{debug, info, warn};

use super::data::{BatchSampler, SequenceMix, SequenceSource};
use super::{EvalPoint, TrainConfig, TrainReport, TrainableScope};
use crate::corpus::{encode_example, AbbrevExample, EncodedSequence, SplitSet};
use crate::error::{CoreError, Result};
use crate::eval::{accuracy_at_k, bleu_at_k, evaluate, Conditioning, DecodeConfig};
use crate::model::checkpoint::{soft_prompt_to_bytes, stored_digest};
use crate::model::graph::{bind_params, logits, prompted, Dropout, Packed};
use crate::model::{Model, SoftPrompt};

/// What a training run updates.
enum Trainee<'a> {
    Full(Model),
    Prompt { base: &'a Model, matrix: Tensor<f32> },
}

impl Trainee<'_> {
    fn model(&self) -> &Model {
        match self {
            Trainee::Full(m) => m,
            Trainee::Prompt { base, .. } => base,
        }
    }

    fn prompt(&self) -> Option<&Tensor<f32>> {
        match self {
            Trainee::Full(_) => None,
            Trainee::Prompt { matrix, .. } => Some(matrix),
        }
    }

    fn scope(&self) -> TrainableScope {
        match self {
            Trainee::Full(_) => TrainableScope::AllParams,
            Trainee::Prompt { .. } => TrainableScope::SoftPromptOnly,
        }
    }

    fn conditioning(&self) -> Conditioning<'_> {
        match self.prompt() {
            Some(p) => Conditioning::SoftPrompt(p),
            None => Conditioning::Plain,
        }
    }

    fn step(
        &mut self,
        batch: &[EncodedSequence],
        lr: f64,
        opt: &mut Adafactor<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let full = matches!(self, Trainee::Full(_));
        let (loss, pvar, params) =
            build_loss(&mut tape, self.model(), self.prompt(), batch, full, Some(rng))?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Ok(value);
        }
        let mut grads = tape.backward(loss)?;
        match self {
            Trainee::Full(model) => {
                let g: Vec<Tensor<f32>> = params.iter().map(|&v| grads.take(v)).collect();
                opt.step(model.params_mut(), &g, lr)?;
            }
            Trainee::Prompt { matrix, .. } => {
                let g = grads.take(pvar.expect("prompt is on the tape"));
                opt.step(std::slice::from_mut(matrix), &[g], lr)?;
            }
        }
        Ok(value)
    }
}

/// Next-token targets and mask for each packed row. Row `r` of a sequence
/// with `prompt_len` prompt rows predicts token `r + 1 - prompt_len`.
fn targets(prompt_len: usize, batch: &[EncodedSequence]) -> (Vec<usize>, Vec<bool>) {
    let mut t = Vec::new();
    let mut m = Vec::new();
    for seq in batch {
        for r in 0..prompt_len + seq.len() {
            match (r + 1).checked_sub(prompt_len) {
                Some(j) if j < seq.len() => {
                    t.push(seq.token_ids[j]);
                    m.push(seq.loss_mask[j]);
                }
                _ => {
                    t.push(0);
                    m.push(false);
                }
            }
        }
    }
    (t, m)
}

/// Loss node, prompt node and parameter nodes.
type LossGraph = (Var, Option<Var>, Vec<Var>);

fn build_loss(
    tape: &mut Tape<f32>,
    model: &Model,
    prompt: Option<&Tensor<f32>>,
    batch: &[EncodedSequence],
    train_model: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossGraph> {
    let cfg = model.config();
    let l = prompt.map_or(0, |p| p.shape()[0]);
    let slots: Vec<_> = batch.iter().map(|s| prompted(l, &s.token_ids)).collect();
    let packed = Packed::new(cfg, l, &slots)?;
    let params = bind_params(tape, model, train_model)?;
    let pvar = prompt.map(|p| tape.param(p.clone())).transpose()?;
    let dropout = match rng {
        Some(rng) if train_model && cfg.dropout > 0.0 => Some(Dropout { p: cfg.dropout, rng }),
        _ => None,
    };
    let out = logits(tape, model, &params, pvar, &packed, dropout)?;
    let (t, m) = targets(l, batch);
    let loss = tape.cross_entropy(out, &t, &m)?;
    Ok((loss, pvar, params))
}

/// Mean masked cross-entropy of `batch`, without dropout or updates.
pub fn train_step_loss(model: &Model, prompt: Option<&Tensor<f32>>, batch: &[EncodedSequence]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _, _) = build_loss(&mut tape, model, prompt, batch, false, None)?;
    Ok(tape.value(loss).data()[0] as f64)
}

fn validate_on(trainee: &Trainee<'_>, val: &[AbbrevExample], cfg: &TrainConfig, step: usize) -> Result<EvalPoint> {
    let decode = DecodeConfig {
        n: cfg.eval_samples,
        seed: cfg.seed,
        ..DecodeConfig::default()
    };
    let rows = evaluate(trainee.model(), trainee.conditioning(), val, &decode)?;
    let p = EvalPoint {
        step,
        accuracy: accuracy_at_k(&rows)?,
        bleu: bleu_at_k(&rows)?,
    };
    info!(step, accuracy = p.accuracy, bleu = p.bleu, "validation");
    Ok(p)
}

/// The shared loop: returns the weights of the best validation step.
fn run<'a>(
    mut trainee: Trainee<'a>,
    source: &SequenceSource<'_>,
    val: &[AbbrevExample],
    cfg: &TrainConfig,
) -> Result<(Trainee<'a>, TrainReport)> {
    cfg.validate()?;
    if cfg.trainable_scope != trainee.scope() {
        return Err(CoreError::InvalidConfig(format!(
            "trainable_scope {:?} does not match this procedure",
            cfg.trainable_scope
        )));
    }
    if val.is_empty() {
        return Err(CoreError::EmptySplit("val"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(source.len())?;
    let mut opt = Adafactor::new(AdafactorConfig::default());

    let first = validate_on(&trainee, val, cfg, 0)?;
    // Accuracy decides; BLEU breaks ties, which matters early on while exact
    // matches are still rare.
    let key = |p: &EvalPoint| (p.accuracy, p.bleu);
    let mut best = (key(&first), 0usize, snapshot(&trainee));
    let mut evals = vec![first];
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut since_best = 0;
    let mut stopped_early = false;

    for step in 0..cfg.max_steps {
        let batch = sampler
            .next_batch(cfg.batch_size, &mut rng)
            .into_iter()
            .map(|i| source.sequence(i, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let lr = cfg.schedule.lr_at(step as u64);
        let loss = trainee.step(&batch, lr, &mut opt, &mut rng)?;
        if !loss.is_finite() {
            warn!(step, "loss is not finite");
            return Err(CoreError::Diverged { step: step as u64 });
        }
        losses.push(loss);
        let done = step + 1;
        if done % 50 == 0 {
            debug!(step = done, loss, lr, "train");
        }
        if done % cfg.eval_every == 0 || done == cfg.max_steps {
            let p = validate_on(&trainee, val, cfg, done)?;
            if key(&p) > best.0 {
                best = (key(&p), done, snapshot(&trainee));
                since_best = 0;
            } else {
                since_best += 1;
            }
            evals.push(p);
            if since_best >= cfg.early_stop_patience && done < cfg.max_steps {
                stopped_early = true;
                break;
            }
        }
    }
    let steps_run = losses.len();
    let (_, selected_step, chosen) = best;
    Ok((
        chosen,
        TrainReport {
            losses,
            evals,
            selected_step,
            steps_run,
            stopped_early,
            digest: String::new(),
        },
    ))
}

fn snapshot<'a>(t: &Trainee<'a>) -> Trainee<'a> {
    match t {
        Trainee::Full(m) => Trainee::Full(m.clone()),
        Trainee::Prompt { base, matrix } => Trainee::Prompt {
            base,
            matrix: matrix.clone(),
        },
    }
}

fn fitting(examples: &[AbbrevExample], max_len: usize) -> Vec<AbbrevExample> {
    let kept: Vec<AbbrevExample> = examples
        .iter()
        .filter(|e| encode_example(e, false, max_len).is_ok())
        .cloned()
        .collect();
    if kept.len() < examples.len() {
        warn!(dropped = examples.len() - kept.len(), max_len, "skipping examples that do not fit");
    }
    kept
}

/// Trains all parameters on `splits.train`, selecting by accuracy on
/// `splits.val`.
pub fn train_base(
    init: &Model,
    splits: &SplitSet,
    cfg: &TrainConfig,
    mix: &SequenceMix,
) -> Result<(Model, TrainReport)> {
    let max_len = init.config().max_context;
    let train = fitting(&splits.train, max_len);
    let source = SequenceSource::new(&train, mix.clone(), max_len)?;
    let (trainee, mut report) = run(Trainee::Full(init.clone()), &source, &splits.val, cfg)?;
    let Trainee::Full(model) = trainee else {
        unreachable!("full training returns a model")
    };
    report.digest = model.digest();
    Ok((model, report))
}

/// Full fine-tuning of a copy of `base` on one user's pairs.
pub fn finetune_user(base: &Model, split: &SplitSet, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    if cfg.max_steps == 0 {
        cfg.validate()?;
        let digest = base.digest();
        return Ok((
            base.clone(),
            TrainReport {
                losses: vec![],
                evals: vec![],
                selected_step: 0,
                steps_run: 0,
                stopped_early: false,
                digest,
            },
        ));
    }
    train_base(base, split, cfg, &SequenceMix::plain())
}

/// Optimizes only `init`'s matrix against the frozen `base`.
pub fn prompt_tune(
    base: &Model,
    split: &SplitSet,
    init: &SoftPrompt,
    cfg: &TrainConfig,
) -> Result<(SoftPrompt, TrainReport)> {
    let before = base.digest();
    if init.base_digest != before {
        return Err(CoreError::DigestMismatch {
            expected: init.base_digest.clone(),
            found: before,
        });
    }
    let max_len = base.config().max_context.saturating_sub(init.len());
    let train = fitting(&split.train, max_len);
    let source = SequenceSource::new(&train, SequenceMix::plain(), max_len)?;
    let trainee = Trainee::Prompt {
        base,
        matrix: init.matrix.clone(),
    };
    let (trainee, mut report) = if cfg.max_steps == 0 {
        cfg.validate()?;
        (trainee, TrainReport {
            losses: vec![],
            evals: vec![],
            selected_step: 0,
            steps_run: 0,
            stopped_early: false,
            digest: String::new(),
        })
    } else {
        run(trainee, &source, &split.val, cfg)?
    };
    let after = base.digest();
    if after != before {
        return Err(CoreError::FrozenBaseViolated { before, after });
    }
    let Trainee::Prompt { matrix, .. } = trainee else {
        unreachable!("prompt tuning returns a prompt")
    };
    let tuned = SoftPrompt {
        matrix,
        ..init.clone()
    };
    report.digest = stored_digest(&soft_prompt_to_bytes(&tuned)).expect("container has a trailer");
    Ok((tuned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Source;

    #[test]
    fn targets_shift_past_prompt() {
        let seq = EncodedSequence {
            token_ids: vec![10, 11, 12],
            loss_mask: vec![false, true, true],
            lengths: (0, 0, 0),
        };
        let (t, m) = targets(2, std::slice::from_ref(&seq));
        // rows: p0 p1 t0 t1 t2 → targets: - t0 t1 t2 -
        assert_eq!(t, vec![0, 10, 11, 12, 0]);
        assert_eq!(m, vec![false, false, true, true, false]);
        let (t, m) = targets(0, &[seq]);
        assert_eq!(t, vec![11, 12, 0]);
        assert_eq!(m, vec![true, true, false]);
    }

    #[test]
    fn scope_must_match() {
        let cfg = crate::model::ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 8,
            max_context: 32,
            ..Default::default()
        };
        let model = Model::init(cfg, 1).unwrap();
        let ex = AbbrevExample::from_text("hi there", None, 0, "u", Source::SyntheticUser).unwrap();
        let split = SplitSet {
            train: vec![ex.clone()],
            val: vec![ex],
            test: vec![],
            policy: crate::corpus::SplitPolicy {
                ratios: [1.0, 0.0, 0.0],
                dedup_val_test: false,
                max_abbrev_len: None,
                pre_filter: [1, 1, 0],
            },
        };
        let wrong = TrainConfig {
            max_steps: 1,
            eval_every: 1,
            ..TrainConfig::prompt_tuning()
        };
        assert!(matches!(
            train_base(&model, &split, &wrong, &SequenceMix::plain()),
            Err(CoreError::InvalidConfig(_))
        ));
    }
}

//! Training procedures: reference step, determinism, selection, frozen base,
//! degenerate runs and memorization.

mod support;

use abbrex_core::corpus::{encode_example, AbbrevExample};
use abbrex_core::eval::{evaluate, sample_expansions, top_k, Conditioning, DecodeConfig};
use abbrex_core::corpus::encode_query;
use abbrex_core::model::graph::{bind_params, logits, prompted, Packed};
use abbrex_core::model::{init_soft_prompt, InitStrategy, Model, Wordlists};
use abbrex_core::tuning::{
    finetune_user, prompt_tune, sweep, train_base, BatchSampler, SequenceMix, SweepGrid, SweepSetup, TrainConfig,
    TrainableScope,
};
use abbrex_numerics::{adafactor_step, AdafactorConfig, LrSchedule, OptimizerState, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn greedy_exact(model: &Model, prompt: Option<&abbrex_numerics::Tensor<f32>>, ex: &AbbrevExample) -> bool {
    let prefix = encode_query(&ex.abbreviation, None).unwrap();
    let cfg = DecodeConfig {
        n: 1,
        temperature: 0.0,
        ..DecodeConfig::default()
    };
    top_k(&sample_expansions(model, prompt, &prefix, &cfg).unwrap(), 1) == vec![ex.expansion.clone()]
}

/// Straight-line loss of a batch: forward, next-token targets, masked mean NLL.
fn reference_loss(model: &Model, batch: &[AbbrevExample]) -> (f64, Vec<abbrex_numerics::Tensor<f32>>) {
    let seqs: Vec<_> = batch.iter().map(|e| encode_example(e, false, 96).unwrap()).collect();
    let slots: Vec<_> = seqs.iter().map(|s| prompted(0, &s.token_ids)).collect();
    let packed = Packed::new(model.config(), 0, &slots).unwrap();
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, model, true).unwrap();
    let out = logits::<ChaCha8Rng>(&mut tape, model, &params, None, &packed, None).unwrap();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for s in &seqs {
        for j in 0..s.len() {
            targets.push(if j + 1 < s.len() { s.token_ids[j + 1] } else { 0 });
            mask.push(j + 1 < s.len() && s.loss_mask[j + 1]);
        }
    }
    // Mean NLL computed by hand from the logits.
    let lv = tape.value(out).clone();
    let mut total = 0.0f64;
    let mut count = 0;
    for (r, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
        if m {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[t] as f64;
            count += 1;
        }
    }
    let loss = tape.cross_entropy(out, &targets, &mask).unwrap();
    let mut g = tape.backward(loss).unwrap();
    let grads = params.iter().map(|&p| g.take(p)).collect();
    (total / count as f64, grads)
}

#[test]
fn first_two_losses_match_reference_loop() {
    let data = support::pairs(40, 1);
    let init = Model::init(support::tiny_config(), 3).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        max_steps: 2,
        eval_every: 2,
        eval_samples: 2,
        ..TrainConfig::base()
    };
    let split = support::split_of(data.clone(), data[..4].to_vec());
    let (_, report) = train_base(&init, &split, &cfg, &SequenceMix::plain()).unwrap();

    // Same batch order as the trainer: the sampler is seeded from the config.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(data.len()).unwrap();
    let mut model = init.clone();
    let mut state = OptimizerState::default();
    for step in 0..2 {
        let idx = sampler.next_batch(8, &mut rng);
        let batch: Vec<AbbrevExample> = idx.iter().map(|&i| data[i].clone()).collect();
        let (loss, grads) = reference_loss(&model, &batch);
        assert!((loss - report.losses[step]).abs() < 1e-6, "step {step}: {loss} vs {}", report.losses[step]);
        adafactor_step(model.params_mut(), &grads, &mut state, &AdafactorConfig::default(), 0.01).unwrap();
    }
}

#[test]
fn determinism_and_selection() {
    let data = support::pairs(64, 2);
    let init = Model::init(support::tiny_config(), 4).unwrap();
    let split = support::split_of(data[..48].to_vec(), data[48..].to_vec());
    let cfg = TrainConfig {
        max_steps: 60,
        eval_every: 20,
        eval_samples: 4,
        ..TrainConfig::base()
    };
    let mix = SequenceMix {
        context_rate: 0.3,
        fewshot_rate: 0.3,
        retrieved_rate: 0.5,
        shots: 2,
    };
    let (a, ra) = train_base(&init, &split, &cfg, &mix).unwrap();
    let (b, rb) = train_base(&init, &split, &cfg, &mix).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.digest(), b.digest());
    assert_eq!(ra.digest, a.digest());
    // Highest accuracy wins, BLEU breaks ties, the earliest of equals is kept.
    let mut first_best = &ra.evals[0];
    for e in &ra.evals[1..] {
        if (e.accuracy, e.bleu) > (first_best.accuracy, first_best.bleu) {
            first_best = e;
        }
    }
    assert_eq!(first_best.step, ra.selected_step);
    assert_eq!(ra.best().unwrap(), first_best);
}

#[test]
fn zero_and_one_step_runs() {
    let data = support::pairs(20, 5);
    let base = Model::init(support::tiny_config(), 5).unwrap();
    let split = support::split_of(data.clone(), data[..3].to_vec());
    let zero = TrainConfig {
        max_steps: 0,
        ..TrainConfig::finetune(5e-5)
    };
    let (m, r) = finetune_user(&base, &split, &zero).unwrap();
    assert_eq!(m.digest(), base.digest());
    assert_eq!(r.digest, base.digest());

    let init = init_soft_prompt(InitStrategy::Random, 4, &base, &Wordlists::default(), 1, "u").unwrap();
    let (p, _) = prompt_tune(&base, &split, &init, &TrainConfig { max_steps: 0, ..TrainConfig::prompt_tuning() }).unwrap();
    assert_eq!(p, init);

    // One step always runs; compare the raw weights, not the selected ones.
    let one = TrainConfig {
        max_steps: 1,
        eval_every: 1,
        eval_samples: 2,
        ..TrainConfig::finetune(5e-5)
    };
    let (m, r) = finetune_user(&base, &split, &one).unwrap();
    assert_eq!(r.steps_run, 1);
    if r.selected_step == 1 {
        assert_ne!(m.digest(), base.digest());
    } else {
        assert_eq!(m.digest(), base.digest());
    }
    let mut moved = base.clone();
    let batch: Vec<AbbrevExample> = data[..4].to_vec();
    let (_, grads) = reference_loss(&moved, &batch);
    adafactor_step(moved.params_mut(), &grads, &mut OptimizerState::default(), &AdafactorConfig::default(), 5e-5).unwrap();
    let changed = moved.params().iter().zip(base.params()).filter(|(a, b)| a != b).count();
    assert!(changed > 0);
}

#[test]
fn prompt_tuning_freezes_base_and_memorizes_one_pair() {
    let (base, held) = support::fluent();
    let target = held
        .iter()
        .find(|e| !greedy_exact(&base, None, e))
        .expect("a held-out pair the base gets wrong")
        .clone();
    let before = base.digest();
    let words = Wordlists {
        user_concepts: target.expansion.split(' ').map(String::from).collect(),
        ..Default::default()
    };
    let init = init_soft_prompt(InitStrategy::UserConcepts, 6, &base, &words, 1, "u").unwrap();
    let split = support::split_of(vec![target.clone()], vec![target.clone()]);
    let cfg = TrainConfig {
        batch_size: 1,
        max_steps: 400,
        eval_every: 50,
        eval_samples: 8,
        early_stop_patience: 8,
        schedule: LrSchedule::warmup_linear_decay(0.1, 20, 400),
        ..TrainConfig::prompt_tuning()
    };
    let (p, report) = prompt_tune(&base, &split, &init, &cfg).unwrap();
    assert_eq!(base.digest(), before);
    assert_eq!(p.base_digest, before);
    assert_ne!(p.matrix, init.matrix);
    assert!(greedy_exact(&base, Some(&p.matrix), &target), "{}", report.table());
}

#[test]
fn finetune_memorizes_and_loss_settles() {
    let data = support::pairs(32, 7);
    let init = Model::init(support::tiny_config(), 12).unwrap();
    let split = support::split_of(data.clone(), data.clone());
    let cfg = support::overfit_config(0.01, 2000, 32);
    let (m, report) = finetune_user(&init, &split, &cfg).unwrap();
    let exact = data.iter().filter(|e| greedy_exact(&m, None, e)).count();
    assert_eq!(exact, 32, "{}", report.table());
    // Full-batch training at a constant rate is not strictly monotone under
    // Adafactor, but each quarter of the run ends lower than the last.
    let l = &report.losses;
    let q = l.len() / 4;
    let means: Vec<f64> = l.chunks(q).take(4).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "quarter means {means:?}");
    assert!(means[3] < 0.05 * l[0], "loss {} never settled: {means:?}", l[0]);
}

#[test]
fn degenerate_sweep_equals_direct_call() {
    let data = support::pairs(40, 8);
    let base = support::memorized(&data[..20]);
    let split = support::split_of(data[20..36].to_vec(), data[36..].to_vec());
    let words = Wordlists {
        user_concepts: vec!["tea".into(), "robin".into()],
        ..Default::default()
    };
    let train = TrainConfig {
        max_steps: 20,
        eval_every: 10,
        eval_samples: 4,
        schedule: LrSchedule::warmup_linear_decay(0.1, 5, 20),
        ..TrainConfig::prompt_tuning()
    };
    let decode = DecodeConfig {
        n: 8,
        ..DecodeConfig::default()
    };
    let setup = SweepSetup {
        base: &base,
        split: &split,
        wordlists: &words,
        user_id: "u",
        train: train.clone(),
        seeds: vec![2],
        decode: decode.clone(),
    };
    let grid = SweepGrid::PromptTuning {
        strategies: vec![InitStrategy::UserConcepts],
        lrs: vec![0.2],
        lengths: vec![4],
    };
    let report = sweep(&setup, &grid).unwrap();
    assert_eq!(report.cells.len(), 1);
    let run = &report.cells[0].runs[0];

    let init = init_soft_prompt(InitStrategy::UserConcepts, 4, &base, &words, 2, "u").unwrap();
    let cfg = TrainConfig {
        seed: 2,
        schedule: LrSchedule::warmup_linear_decay(0.2, 5, 20),
        ..train
    };
    let (p, direct) = prompt_tune(&base, &split, &init, &cfg).unwrap();
    assert_eq!(run.report, direct);
    let rows = evaluate(&base, Conditioning::SoftPrompt(&p.matrix), &split.val, &decode.with_seed(2)).unwrap();
    assert_eq!(run.accuracy, abbrex_core::eval::accuracy_at_k(&rows).unwrap());
    assert_eq!(report.cells[0].accuracy.std, 0.0);
    assert_eq!(TrainConfig::prompt_tuning().trainable_scope, TrainableScope::SoftPromptOnly);
}

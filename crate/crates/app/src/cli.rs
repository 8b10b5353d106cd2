//! Command-line entry points. Each subcommand is a thin orchestration of the
//! library operations; results go to stdout, logs to stderr.

use std::fs;
use std::path::{Path, PathBuf};

use abbrex_core::corpus::synthetic::{corpus_vocabulary, dialog_corpus, make_synthetic_user, movie_lines, PersonaParams};
use abbrex_core::corpus::{
    chronological_split, ingest, ingest_str, select_characters, top_words, AbbrevExample, Format, Source, SplitSet,
};
use abbrex_core::eval::{
    accuracy_at_k, bleu_at_k, evaluate, length_report_csv, length_sliced_report, Conditioning, DecodeConfig,
    Strategy,
};
use abbrex_core::model::checkpoint::{load_soft_prompt, save_soft_prompt};
use abbrex_core::model::{
    init_soft_prompt, load_checkpoint, save_checkpoint, InitStrategy, Model, ModelConfig, Wordlists,
};
use abbrex_core::retrieval::RetrievalIndex;
use abbrex_core::tuning::{
    finetune_user, prompt_tune, sweep, train_base, SequenceMix, SweepGrid, SweepSetup, TrainConfig, TrainReport,
};
use abbrex_numerics::LrSchedule;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::info;

use crate::bench::{per_character, per_character_csv, throughput, CharacterConfig};
use crate::data::{read_examples, read_split, read_wordlists, write_examples, write_split, write_wordlists};
use crate::error::{AppError, Result};
use crate::registry::Registry;
use crate::service::{self, AppState, ServiceConfig};

/// Chronological split of the synthetic user before filtering: 630 / 285 / 284.
pub const USER_RATIOS: [f64; 3] = [630.0 / 1199.0, 285.0 / 1199.0, 284.0 / 1199.0];
pub const DIALOG_RATIOS: [f64; 3] = [0.96, 0.02, 0.02];
pub const CHARACTER_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];
/// Longest abbreviation kept in personal val/test splits.
pub const AAC_MAX_ABBREV_LEN: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "abbrex", version, about = "Personalized abbreviation expansion with a character-level language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or ingest a corpus and write chronological train/val/test splits.
    PrepareData(PrepareArgs),
    /// Train the base abbreviation-expansion model.
    TrainBase(TrainBaseArgs),
    /// Personalize the base model for one user.
    #[command(subcommand)]
    Personalize(Personalize),
    /// Compare strategies on a user's split: one CSV row per strategy.
    Eval(EvalArgs),
    /// Grid of personalization runs, each repeated over seeds.
    #[command(subcommand)]
    Sweep(SweepCmd),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Per-character personalization report and prompt inference cost.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceKind {
    /// Synthetic multi-speaker dialog corpus for base training.
    Dialog,
    /// Synthetic personalization target with invented proper nouns.
    User,
    /// JSONL utterances: {"text", "speaker", "t", "context"?}.
    Jsonl,
    /// Cornell-style movie lines; one split per selected character.
    Cornell,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long, value_enum)]
    pub source: SourceKind,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Input file for jsonl / cornell sources; synthetic lines when cornell has none.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub speakers: usize,
    #[arg(long, default_value_t = 24_000)]
    pub utterances: usize,
    #[arg(long, default_value_t = 1199)]
    pub sentences: usize,
    #[arg(long, default_value_t = 10)]
    pub novel_nouns: usize,
    /// Prepared base-corpus directory; its words are excluded from the
    /// synthetic user's invented nouns.
    #[arg(long)]
    pub base_data: Option<PathBuf>,
    /// Comma-separated train,val,test ratios (default depends on the source).
    #[arg(long, value_delimiter = ',')]
    pub ratios: Vec<f64>,
    /// Keep repeated val/test sentences.
    #[arg(long)]
    pub no_dedup: bool,
    /// Longest val/test abbreviation (default 10 for personal data).
    #[arg(long)]
    pub max_abbrev_len: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub min_conversations: usize,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 512)]
    pub ffn: usize,
    #[arg(long, default_value_t = 512)]
    pub max_context: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1)]
    pub init_seed: u64,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.layers,
            n_heads: self.heads,
            d_ffn: self.ffn,
            max_context: self.max_context,
            dropout: self.dropout,
            ..Default::default()
        }
    }
}

/// Overrides on top of a command's default training configuration.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// JSON TrainConfig used as the starting point instead of the defaults.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Constant rate, or the peak of a warmup schedule.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per validation expansion during training.
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Use at most this many validation examples during training.
    #[arg(long)]
    pub val_limit: Option<usize>,
}

impl TrainFlags {
    pub fn apply(&self, default: TrainConfig) -> Result<TrainConfig> {
        let mut c = match &self.train_config {
            Some(p) => serde_json::from_slice(&fs::read(p)?)?,
            None => default,
        };
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {$(if let Some(v) = self.$f { c.$g = v; })*};
        }
        set!(batch_size => batch_size, steps => max_steps, eval_every => eval_every,
             patience => early_stop_patience, seed => seed, eval_samples => eval_samples);
        c.schedule = match c.schedule {
            LrSchedule::Constant { peak } => LrSchedule::constant(self.lr.unwrap_or(peak)),
            LrSchedule::WarmupLinearDecay {
                peak,
                warmup_steps,
                total_steps,
            } => {
                // A shortened run keeps at least one decaying step.
                let total = if self.steps.is_some() { c.max_steps as u64 } else { total_steps }.max(1);
                let warmup = self.warmup.unwrap_or(warmup_steps).min(total - 1);
                LrSchedule::warmup_linear_decay(self.lr.unwrap_or(peak), warmup, total)
            }
        };
        if c.max_steps > 0 && c.eval_every > c.max_steps {
            c.eval_every = c.max_steps;
        }
        c.validate()?;
        Ok(c)
    }

    fn limit_val(&self, split: &mut SplitSet) {
        if let Some(n) = self.val_limit {
            split.val.truncate(n);
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainBaseArgs {
    /// Prepared corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// TrainReport JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Share of plain pairs carrying their previous turn.
    #[arg(long, default_value_t = 0.0)]
    pub context_rate: f64,
    /// Share of sequences framed as few-shot prompts.
    #[arg(long, default_value_t = 0.0)]
    pub fewshot_rate: f64,
    /// Of the few-shot sequences, the share with retrieved demonstrations.
    #[arg(long, default_value_t = 0.5)]
    pub retrieved_rate: f64,
    #[arg(long, default_value_t = 4)]
    pub shots: usize,
}

#[derive(Debug, Args)]
pub struct UserArgs {
    /// Base checkpoint.
    #[arg(long, env = "ABBREX_BASE")]
    pub base: PathBuf,
    /// Prepared user directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "user")]
    pub user_id: String,
    /// Also install the result into this service registry.
    #[arg(long, env = "ABBREX_REGISTRY")]
    pub registry: Option<PathBuf>,
    /// TrainReport JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Personalize {
    /// Full fine-tuning (defaults: lr 5e-5 constant, 2000 steps, batch 16).
    Finetune {
        #[command(flatten)]
        user: UserArgs,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Soft-prompt tuning with a frozen base (defaults: length 10, batch 16,
    /// 20000 steps, peak lr 0.1 after 1000 warmup steps).
    PromptTune {
        #[command(flatten)]
        user: UserArgs,
        /// Soft-prompt file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "user_concepts")]
        init: InitStrategy,
        #[arg(long, default_value_t = 10)]
        length: usize,
        /// Word lists for word-based initializations (default: DATA/wordlists.json).
        #[arg(long)]
        wordlists: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// No training: load the user's history into registry memory for
    /// retrieval-augmented prompting.
    None {
        #[command(flatten)]
        user: UserArgs,
    },
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1)]
    pub decode_seed: u64,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            n: self.samples,
            temperature: self.temperature,
            seed: self.decode_seed,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "ABBREX_BASE")]
    pub base: PathBuf,
    /// Prepared user directory; its train split is the ICL / retrieval history.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated strategies (default: base, icl, raIcl, plus fineTuned /
    /// promptTuned when their files are given).
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<Strategy>,
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    #[arg(long)]
    pub finetuned: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Evaluate at most this many examples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub shots: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Per-example rows as JSONL.
    #[arg(long)]
    pub rows: Option<PathBuf>,
    /// Per-abbreviation-length CSV.
    #[arg(long)]
    pub lengths: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepCommon {
    #[arg(long, env = "ABBREX_BASE")]
    pub base: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "user")]
    pub user_id: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Full SweepReport JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SweepCmd {
    /// Initialization × peak lr × length grid for soft prompts.
    PromptTuning {
        #[command(flatten)]
        common: SweepCommon,
        #[arg(long, value_delimiter = ',', default_value = "random,corpus_vocab,user_vocab,user_concepts,concept_antonyms")]
        strategies: Vec<InitStrategy>,
        #[arg(long, value_delimiter = ',', default_value = "0.1")]
        lrs: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "10")]
        lengths: Vec<usize>,
        #[arg(long)]
        wordlists: Option<PathBuf>,
    },
    /// Constant learning rates for full fine-tuning.
    FineTuning {
        #[command(flatten)]
        common: SweepCommon,
        #[arg(long, value_delimiter = ',', default_value = "1e-5,1e-6,5e-5")]
        lrs: Vec<f64>,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "ABBREX_BASE")]
    pub base: PathBuf,
    /// Registry directory; in-memory when absent.
    #[arg(long, env = "ABBREX_REGISTRY")]
    pub registry: Option<PathBuf>,
    #[arg(long, env = "ABBREX_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Static bearer token required on /v1 routes other than health.
    #[arg(long, env = "ABBREX_TOKEN")]
    pub token: Option<String>,
    /// Default samples per request.
    #[arg(long, default_value_t = service::DEFAULT_REQUEST_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = service::DEFAULT_SHOTS)]
    pub shots: usize,
    #[arg(long, default_value_t = 600)]
    pub request_ttl_secs: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, env = "ABBREX_BASE")]
    pub base: PathBuf,
    /// Per-character base vs prompt-tuned comparison.
    #[arg(long)]
    pub per_character: bool,
    /// Prompt-tuned vs base token throughput.
    #[arg(long)]
    pub throughput: bool,
    /// Cornell-style movie lines; synthetic characters when absent.
    #[arg(long)]
    pub lines: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub characters: usize,
    #[arg(long, default_value_t = 100)]
    pub min_conversations: usize,
    /// Seed for synthetic characters, fixtures and random prompts.
    #[arg(long, default_value_t = 7)]
    pub corpus_seed: u64,
    #[arg(long, default_value = "user_vocab")]
    pub init: InitStrategy,
    #[arg(long, default_value_t = 10)]
    pub length: usize,
    /// Prepared base corpus, for corpus-vocabulary initialization.
    #[arg(long)]
    pub base_data: Option<PathBuf>,
    /// Soft prompt for the throughput run (random init when absent).
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    /// Prepared directory whose test split is the throughput fixture.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(a) => prepare_data(&a),
        Command::TrainBase(a) => train_base_cmd(&a),
        Command::Personalize(p) => personalize(p),
        Command::Eval(a) => eval_cmd(&a),
        Command::Sweep(s) => sweep_cmd(s),
        Command::Serve(a) => serve_cmd(&a),
        Command::Bench(a) => bench_cmd(&a),
    }
}

fn ratios(given: &[f64], default: [f64; 3]) -> Result<[f64; 3]> {
    match given {
        [] => Ok(default),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(AppError::Invalid("--ratios takes three values".into())),
    }
}

fn emit_report(path: Option<&Path>, report: &TrainReport) -> Result<()> {
    eprint!("{}", report.table());
    if let Some(p) = path {
        fs::write(p, serde_json::to_vec_pretty(report)?)?;
    }
    Ok(())
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn prepare_data(a: &PrepareArgs) -> Result<()> {
    let params = PersonaParams::default();
    let dedup = !a.no_dedup;
    match a.source {
        SourceKind::Dialog | SourceKind::Jsonl => {
            let examples = if a.source == SourceKind::Dialog {
                dialog_corpus(a.seed, a.speakers, a.utterances, &params).examples
            } else {
                let input = a.input.as_ref().ok_or_else(|| AppError::Invalid("--input is required".into()))?;
                ingest(input, Format::Jsonl)?
            };
            let split = chronological_split(&examples, ratios(&a.ratios, DIALOG_RATIOS)?, dedup, a.max_abbrev_len)?;
            write_split(&a.out, &split)?;
            print_json(&split.manifest())
        }
        SourceKind::User => {
            let base_train = match &a.base_data {
                Some(d) => read_examples(&d.join("train.jsonl"))?,
                None => dialog_corpus(a.seed, a.speakers, a.utterances, &params).examples,
            };
            let vocab = corpus_vocabulary(&base_train);
            let user = make_synthetic_user(a.seed, a.sentences, a.novel_nouns, &vocab, &params)?;
            let max_len = a.max_abbrev_len.or(Some(AAC_MAX_ABBREV_LEN));
            let split = chronological_split(&user.examples, ratios(&a.ratios, USER_RATIOS)?, dedup, max_len)?;
            write_split(&a.out, &split)?;
            let words = Wordlists {
                corpus_vocab: top_words(base_train.iter().map(|e| e.expansion.as_str()), 5000),
                user_vocab: top_words(split.train.iter().map(|e| e.expansion.as_str()), 25),
                user_concepts: user.concepts.clone(),
                concept_antonyms: user.antonyms.clone(),
            };
            write_wordlists(&a.out, &words)?;
            let mut m = split.manifest();
            m["novel_nouns"] = serde_json::to_value(&user.novel_nouns)?;
            m["proper_noun_rate"] = user.proper_noun_rate.into();
            fs::write(a.out.join("manifest.json"), serde_json::to_vec_pretty(&m)?)?;
            print_json(&m)
        }
        SourceKind::Cornell => {
            let examples = match &a.input {
                Some(p) => ingest(p, Format::CornellSeparator)?,
                None => ingest_str(
                    &movie_lines(a.seed, a.speakers.min(10), (104, 344), &params),
                    Format::CornellSeparator,
                    Source::MovieCharacter,
                )?,
            };
            let sel = select_characters(&examples, a.min_conversations);
            let max_len = a.max_abbrev_len.or(Some(AAC_MAX_ABBREV_LEN));
            let r = ratios(&a.ratios, CHARACTER_RATIOS)?;
            let mut summary = Vec::new();
            for (name, exs) in &sel.characters {
                let split = chronological_split(exs, r, dedup, max_len)?;
                write_split(&a.out.join(name), &split)?;
                summary.push(serde_json::json!({ "character": name, "counts": split.sizes() }));
            }
            print_json(&serde_json::json!({
                "characters": summary,
                "mean_count": sel.mean_count,
                "median_count": sel.median_count,
            }))
        }
    }
}

fn train_base_cmd(a: &TrainBaseArgs) -> Result<()> {
    let mut split = read_split(&a.data)?;
    a.train.limit_val(&mut split);
    let cfg = a.train.apply(TrainConfig::base())?;
    let init = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => Model::init(a.model.config(), a.model.init_seed)?,
    };
    let mix = SequenceMix {
        context_rate: a.context_rate,
        fewshot_rate: a.fewshot_rate,
        retrieved_rate: a.retrieved_rate,
        shots: a.shots,
    };
    info!(params = init.parameter_count(), train = split.train.len(), "training base model");
    let (model, report) = train_base(&init, &split, &cfg, &mix)?;
    let digest = save_checkpoint(&model, &a.out)?;
    emit_report(a.report.as_deref(), &report)?;
    print_json(&serde_json::json!({ "checkpoint": a.out, "digest": digest, "selected_step": report.selected_step }))
}

fn open_registry(path: &Path, base: &Model) -> Result<Registry> {
    Registry::open(path, base)
}

fn personalize(p: Personalize) -> Result<()> {
    match p {
        Personalize::Finetune { user, out, train } => {
            let base = load_checkpoint(&user.base)?;
            let mut split = read_split(&user.data)?;
            train.limit_val(&mut split);
            let cfg = train.apply(TrainConfig::finetune(5e-5))?;
            let (model, report) = finetune_user(&base, &split, &cfg)?;
            let digest = save_checkpoint(&model, &out)?;
            if let Some(r) = &user.registry {
                let reg = open_registry(r, &base)?;
                reg.set_fine_tuned(&user.user_id, model)?;
                reg.set_default_strategy(&user.user_id, Strategy::FineTuned)?;
            }
            emit_report(user.report.as_deref(), &report)?;
            print_json(&serde_json::json!({ "checkpoint": out, "digest": digest, "selected_step": report.selected_step }))
        }
        Personalize::PromptTune {
            user,
            out,
            init,
            length,
            wordlists,
            train,
        } => {
            let base = load_checkpoint(&user.base)?;
            let mut split = read_split(&user.data)?;
            train.limit_val(&mut split);
            let words = read_wordlists(&wordlists.unwrap_or_else(|| user.data.join("wordlists.json")))?;
            let cfg = train.apply(TrainConfig::prompt_tuning())?;
            let start = init_soft_prompt(init, length, &base, &words, cfg.seed, &user.user_id)?;
            let (prompt, report) = prompt_tune(&base, &split, &start, &cfg)?;
            save_soft_prompt(&prompt, &out)?;
            if let Some(r) = &user.registry {
                let reg = open_registry(r, &base)?;
                reg.put_prompt(&user.user_id, fs::read(&out)?)?;
                reg.set_default_strategy(&user.user_id, Strategy::PromptTuned)?;
            }
            emit_report(user.report.as_deref(), &report)?;
            print_json(&serde_json::json!({
                "prompt": out,
                "digest": report.digest,
                "base_digest": prompt.base_digest,
                "selected_step": report.selected_step,
            }))
        }
        Personalize::None { user } => {
            let base = load_checkpoint(&user.base)?;
            let split = read_split(&user.data)?;
            let r = user
                .registry
                .as_ref()
                .ok_or_else(|| AppError::Invalid("personalize none needs --registry".into()))?;
            let reg = open_registry(r, &base)?;
            let n = reg.seed_memory(&user.user_id, &split.train)?;
            reg.set_default_strategy(&user.user_id, Strategy::RaIcl)?;
            print_json(&serde_json::json!({ "user_id": user.user_id, "memory_entries": n }))
        }
    }
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let base = load_checkpoint(&a.base)?;
    let split = read_split(&a.data)?;
    let mut examples: Vec<AbbrevExample> = match a.split {
        SplitName::Val => split.val.clone(),
        SplitName::Test => split.test.clone(),
    };
    if let Some(n) = a.limit {
        examples.truncate(n);
    }
    let strategies = if a.strategies.is_empty() {
        let mut s = vec![Strategy::Base, Strategy::Icl, Strategy::RaIcl];
        if a.finetuned.is_some() {
            s.push(Strategy::FineTuned);
        }
        if a.prompt.is_some() {
            s.push(Strategy::PromptTuned);
        }
        s
    } else {
        a.strategies.clone()
    };
    let prompt = a.prompt.as_ref().map(load_soft_prompt).transpose()?;
    if let Some(p) = &prompt {
        if p.base_digest != base.digest() {
            return Err(AppError::BaseMismatch {
                served: base.digest(),
                prompt: p.base_digest.clone(),
            });
        }
    }
    let finetuned = a.finetuned.as_ref().map(load_checkpoint).transpose()?;
    let memory = RetrievalIndex::from_examples(&split.train)?;
    let decode = a.decode.config();
    let mut csv = String::from("strategy,accuracy_at_5,bleu_at_5,examples\n");
    let mut rows_out = String::new();
    let mut lengths_out = String::new();
    for s in strategies {
        let missing = |what: &str| AppError::Invalid(format!("strategy {s} needs --{what}"));
        let (model, cond) = match s {
            Strategy::Base => (&base, Conditioning::Plain),
            Strategy::Icl => (&base, Conditioning::RandomShots { pool: &split.train, k: a.shots }),
            Strategy::RaIcl => (&base, Conditioning::Retrieved { memory: &memory, k: a.shots }),
            Strategy::PromptTuned => (
                &base,
                Conditioning::SoftPrompt(&prompt.as_ref().ok_or_else(|| missing("prompt"))?.matrix),
            ),
            Strategy::FineTuned => (finetuned.as_ref().ok_or_else(|| missing("finetuned"))?, Conditioning::Plain),
        };
        let rows = evaluate(model, cond, &examples, &decode)?;
        let (acc, bleu) = (accuracy_at_k(&rows)?, bleu_at_k(&rows)?);
        info!(strategy = %s, accuracy = acc, bleu, "evaluated");
        csv.push_str(&format!("{s},{acc:.2},{bleu:.2},{}\n", rows.len()));
        for r in &rows {
            let mut v = serde_json::to_value(r)?;
            v["strategy"] = s.as_str().into();
            rows_out.push_str(&serde_json::to_string(&v)?);
            rows_out.push('\n');
        }
        let table = length_report_csv(&length_sliced_report(&rows));
        for (i, line) in table.lines().enumerate() {
            if i == 0 {
                if lengths_out.is_empty() {
                    lengths_out.push_str(&format!("strategy,{line}\n"));
                }
            } else {
                lengths_out.push_str(&format!("{s},{line}\n"));
            }
        }
    }
    if let Some(p) = &a.rows {
        fs::write(p, rows_out)?;
    }
    if let Some(p) = &a.lengths {
        fs::write(p, lengths_out)?;
    }
    print!("{csv}");
    Ok(())
}

fn sweep_cmd(s: SweepCmd) -> Result<()> {
    let (common, grid, default_cfg, wordlists) = match s {
        SweepCmd::PromptTuning {
            common,
            strategies,
            lrs,
            lengths,
            wordlists,
        } => (
            common,
            SweepGrid::PromptTuning { strategies, lrs, lengths },
            TrainConfig::prompt_tuning(),
            wordlists,
        ),
        SweepCmd::FineTuning { common, lrs } => {
            (common, SweepGrid::FineTuning { lrs }, TrainConfig::finetune(5e-5), None)
        }
    };
    let base = load_checkpoint(&common.base)?;
    let mut split = read_split(&common.data)?;
    common.train.limit_val(&mut split);
    let words = read_wordlists(&wordlists.unwrap_or_else(|| common.data.join("wordlists.json")))?;
    let setup = SweepSetup {
        base: &base,
        split: &split,
        wordlists: &words,
        user_id: &common.user_id,
        train: common.train.apply(default_cfg)?,
        seeds: common.seeds.clone(),
        decode: common.decode.config(),
    };
    let report = sweep(&setup, &grid)?;
    if let Some(p) = &common.json {
        fs::write(p, serde_json::to_vec_pretty(&report)?)?;
    }
    print!("{}", report.table());
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let base = load_checkpoint(&a.base)?;
    let registry = match &a.registry {
        Some(p) => Registry::open(p, &base)?,
        None => Registry::ephemeral(&base),
    };
    let cfg = ServiceConfig {
        samples: a.samples,
        temperature: a.temperature,
        shots: a.shots,
        request_ttl: std::time::Duration::from_secs(a.request_ttl_secs),
        token: a.token.clone(),
        ..Default::default()
    };
    let state = AppState::new(base, registry, cfg);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(state, &a.addr))
}

fn bench_cmd(a: &BenchArgs) -> Result<()> {
    if !a.per_character && !a.throughput {
        return Err(AppError::Invalid("choose --per-character and/or --throughput".into()));
    }
    let base = load_checkpoint(&a.base)?;
    if a.throughput {
        let prompt = match &a.prompt {
            Some(p) => load_soft_prompt(p)?,
            None => init_soft_prompt(InitStrategy::Random, a.length, &base, &Wordlists::default(), a.corpus_seed, "bench")?,
        };
        let fixture = match &a.data {
            Some(d) => read_split(d)?.test,
            None => dialog_corpus(a.corpus_seed, 4, 64, &PersonaParams::default()).examples,
        };
        let report = throughput(&base, &prompt, &fixture, a.repeats)?;
        print_json(&report)?;
    }
    if a.per_character {
        let params = PersonaParams::default();
        let examples = match &a.lines {
            Some(p) => ingest(p, Format::CornellSeparator)?,
            None => ingest_str(
                &movie_lines(a.corpus_seed, a.characters, (104, 344), &params),
                Format::CornellSeparator,
                Source::MovieCharacter,
            )?,
        };
        let selection = select_characters(&examples, a.min_conversations);
        let corpus_vocab = match &a.base_data {
            Some(d) => top_words(read_examples(&d.join("train.jsonl"))?.iter().map(|e| e.expansion.as_str()), 5000),
            None => Vec::new(),
        };
        let cfg = CharacterConfig {
            train: a.train.apply(TrainConfig::prompt_tuning())?,
            init: a.init,
            prompt_len: a.length,
            decode: a.decode.config(),
            ratios: CHARACTER_RATIOS,
            max_abbrev_len: Some(AAC_MAX_ABBREV_LEN),
            corpus_vocab,
        };
        let rows = per_character(&base, &selection, &cfg)?;
        print!("{}", per_character_csv(&rows));
    }
    Ok(())
}

/// Writes `examples` as a prepared directory with everything in train; handy
/// for tests and ad-hoc runs.
pub fn write_flat(dir: &Path, examples: &[AbbrevExample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_examples(&dir.join("train.jsonl"), examples)
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn train_flags_override_defaults() {
        let flags = TrainFlags {
            train_config: None,
            batch_size: None,
            steps: Some(600),
            lr: Some(0.3),
            warmup: Some(60),
            eval_every: None,
            patience: None,
            seed: Some(2),
            eval_samples: None,
            val_limit: None,
        };
        let c = flags.apply(TrainConfig::prompt_tuning()).unwrap();
        assert_eq!(c.schedule, LrSchedule::warmup_linear_decay(0.3, 60, 600));
        assert_eq!((c.max_steps, c.seed, c.eval_every), (600, 2, 500));
        let none = TrainFlags { steps: None, lr: None, warmup: None, seed: None, ..flags };
        assert_eq!(none.apply(TrainConfig::prompt_tuning()).unwrap(), TrainConfig::prompt_tuning());
    }
}

//! Command-line pipeline: ingest, split, synthesize, train, evaluate,
//! recommend.
//!
//! Settings resolve as defaults ← `--config` file section ← flags. The
//! config file is TOML with one table per concern (`paths`, `train`,
//! `evaluate`, `split`, `synthesize`, `ingest`). The resolved configuration
//! is logged before any work starts.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{self, Corpus, IngestOptions, SplitRule, SyntheticSpec, Transition};
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, PredictMode};
use crate::numerics::Execution;
use crate::objective::LossKind;
use crate::trainer::{self, Checkpoint, TrainConfig, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Io { .. } | Error::Data(_) | Error::Format(_) => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "varec", version, about = "Variational GRU session-based recommender")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse a delimited click log into a corpus file.
    Ingest(IngestArgs),
    /// Partition a corpus into train and test corpora.
    Split(SplitArgs),
    /// Generate a synthetic corpus.
    Synthesize(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Compute Recall@K and MRR@K on a corpus.
    Evaluate(EvalArgs),
    /// Top-k next items for a partial session.
    Recommend(RecommendArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Fail on malformed rows instead of skipping them.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    ByTime,
    ByCount,
    ByHash,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output prefix: writes `<out>.train.bin` and `<out>.test.bin`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitKind>,
    /// by-time: epoch seconds or ISO-8601.
    #[arg(long)]
    pub cutoff: Option<String>,
    /// by-count: number of test sessions.
    #[arg(long)]
    pub test_count: Option<usize>,
    /// by-hash: expected test fraction.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Uniform,
    Cyclic,
    Markov,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<SynthKind>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// markov: successors per item.
    #[arg(long)]
    pub fanout: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint (its configuration is reused).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Validation corpus evaluated after every epoch.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Training log (JSON lines); defaults to `<checkpoint>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub train_samples: Option<usize>,
    #[arg(long)]
    pub bptt_window: Option<usize>,
    #[arg(long)]
    pub shuffle: Option<bool>,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Args, Debug, Default)]
pub struct EvalFlags {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub gamma_eval: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    McMean,
    MeanState,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report prefix: writes `<out>.txt` and `<out>.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Args, Debug)]
pub struct RecommendArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Raw item ids of the session so far, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub items: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub data: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub rule: SplitKind,
    pub cutoff: Option<String>,
    pub test_count: Option<usize>,
    pub test_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            rule: SplitKind::ByTime,
            cutoff: None,
            test_count: None,
            test_fraction: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub items: usize,
    pub sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub fanout: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: SynthKind::Cyclic,
            items: 50,
            sessions: 200,
            min_len: 5,
            max_len: 15,
            fanout: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub delimiter: char,
    pub strict: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            delimiter: ',',
            strict: false,
        }
    }
}

/// Everything a run can be configured with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathConfig,
    pub train: TrainConfig,
    pub evaluate: EvalConfig,
    pub split: SplitConfig,
    pub synthesize: SynthConfig,
    pub ingest: IngestConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("<unprintable config: {e}>"))
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn require(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("missing required --{flag}")))
}

fn apply_eval_flags(cfg: &mut EvalConfig, f: &EvalFlags) {
    set(&mut cfg.k, f.k);
    set(&mut cfg.samples, f.gamma_eval);
    set(&mut cfg.seed, f.eval_seed);
    if let Some(m) = f.mode {
        cfg.mode = match m {
            ModeArg::McMean => PredictMode::McMean,
            ModeArg::MeanState => PredictMode::MeanState,
        };
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the text destined for stdout.
pub fn run_from_args<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            return Err(CliError {
                code,
                message: e.render().to_string(),
            });
        }
    };
    run(cli).map_err(CliError::from)
}

pub fn run(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Ingest(a) => {
            set(&mut cfg.paths.data, a.data.map(Some));
            set(&mut cfg.paths.out, a.out.map(Some));
            set(&mut cfg.ingest.delimiter, a.delimiter);
            cfg.ingest.strict |= a.strict;
            log_config(&cfg);
            cmd_ingest(&cfg)
        }
        Command::Split(a) => {
            set(&mut cfg.paths.corpus, a.corpus.map(Some));
            set(&mut cfg.paths.out, a.out.map(Some));
            set(&mut cfg.split.rule, a.split);
            set(&mut cfg.split.cutoff, a.cutoff.map(Some));
            set(&mut cfg.split.test_count, a.test_count.map(Some));
            set(&mut cfg.split.test_fraction, a.test_fraction.map(Some));
            set(&mut cfg.split.seed, a.seed);
            log_config(&cfg);
            cmd_split(&cfg)
        }
        Command::Synthesize(a) => {
            set(&mut cfg.paths.out, a.out.map(Some));
            let s = &mut cfg.synthesize;
            set(&mut s.kind, a.kind);
            set(&mut s.items, a.items);
            set(&mut s.sessions, a.sessions);
            set(&mut s.min_len, a.min_len);
            set(&mut s.max_len, a.max_len);
            set(&mut s.fanout, a.fanout);
            set(&mut s.seed, a.seed);
            log_config(&cfg);
            cmd_synthesize(&cfg)
        }
        Command::Train(a) => {
            set(&mut cfg.paths.corpus, a.corpus.map(Some));
            set(&mut cfg.paths.checkpoint, a.checkpoint.map(Some));
            set(&mut cfg.paths.valid, a.valid.map(Some));
            set(&mut cfg.paths.log, a.log.map(Some));
            let resume = match &a.resume {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    // the stored configuration wins over the file; flags still override
                    cfg.train = ck.config.clone();
                    Some(ck)
                }
                None => None,
            };
            let t = &mut cfg.train;
            set(&mut t.seed, a.seed);
            set(&mut t.latent_dim, a.latent_dim);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.step_size, a.step_size);
            set(&mut t.momentum, a.momentum);
            set(&mut t.dropout, a.dropout);
            set(&mut t.epochs, a.epochs);
            set(&mut t.loss, a.loss);
            set(&mut t.kl_weight, a.kl_weight);
            set(&mut t.train_samples, a.train_samples);
            set(&mut t.bptt_window, a.bptt_window);
            set(&mut t.shuffle, a.shuffle);
            apply_eval_flags(&mut cfg.evaluate, &a.eval);
            cfg.train.validate()?;
            cfg.evaluate.validate()?;
            log_config(&cfg);
            cmd_train(&cfg, resume, exec)
        }
        Command::Evaluate(a) => {
            set(&mut cfg.paths.corpus, a.corpus.map(Some));
            set(&mut cfg.paths.checkpoint, a.checkpoint.map(Some));
            set(&mut cfg.paths.out, a.out.map(Some));
            apply_eval_flags(&mut cfg.evaluate, &a.eval);
            set(&mut cfg.evaluate.seed, a.seed);
            cfg.evaluate.validate()?;
            log_config(&cfg);
            cmd_evaluate(&cfg, exec)
        }
        Command::Recommend(a) => {
            set(&mut cfg.paths.checkpoint, a.checkpoint.map(Some));
            apply_eval_flags(&mut cfg.evaluate, &a.eval);
            set(&mut cfg.evaluate.seed, a.seed);
            cfg.evaluate.validate()?;
            log_config(&cfg);
            cmd_recommend(&cfg, &a.items)
        }
    }
}

fn log_config(cfg: &RunConfig) {
    info!("resolved configuration:\n{}", cfg.to_toml());
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<String> {
    let data_path = require(&cfg.paths.data, "data")?;
    let out = require(&cfg.paths.out, "out")?;
    let delimiter = u8::try_from(cfg.ingest.delimiter)
        .map_err(|_| Error::Config("delimiter must be a single ASCII character".into()))?;
    let opts = IngestOptions {
        delimiter,
        strict: cfg.ingest.strict,
    };
    let (corpus, report) = data::ingest(&data_path, &opts)?;
    data::write_corpus(&corpus, &out)?;
    Ok(format!(
        "sessions={} items={} events={} dropped_sessions={} malformed_rows={}\n",
        corpus.sessions.len(),
        corpus.vocab.len(),
        corpus.num_events(),
        report.dropped_sessions,
        report.malformed_rows
    ))
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_split(cfg: &RunConfig) -> Result<String> {
    let corpus_path = require(&cfg.paths.corpus, "corpus")?;
    let out = require(&cfg.paths.out, "out")?;
    let s = &cfg.split;
    let rule = match s.rule {
        SplitKind::ByTime => {
            let raw = s
                .cutoff
                .as_deref()
                .ok_or_else(|| Error::Config("by-time split needs --cutoff".into()))?;
            let cutoff = data::parse_timestamp(raw)
                .ok_or_else(|| Error::Config(format!("unparseable cutoff `{raw}`")))?;
            SplitRule::ByTime { cutoff }
        }
        SplitKind::ByCount => SplitRule::ByCount {
            n_test: s
                .test_count
                .ok_or_else(|| Error::Config("by-count split needs --test-count".into()))?,
        },
        SplitKind::ByHash => SplitRule::ByHash {
            fraction: s
                .test_fraction
                .ok_or_else(|| Error::Config("by-hash split needs --test-fraction".into()))?,
            seed: s.seed,
        },
    };
    let corpus = data::read_corpus(&corpus_path)?;
    let (train, test, report) = data::split(&corpus.sessions, &rule)?;
    let train_path = prefixed(&out, ".train.bin");
    let test_path = prefixed(&out, ".test.bin");
    data::write_corpus(&Corpus { vocab: corpus.vocab.clone(), sessions: train }, &train_path)?;
    data::write_corpus(&Corpus { vocab: corpus.vocab, sessions: test }, &test_path)?;
    Ok(format!(
        "train_sessions={} test_sessions={} filtered_events={} dropped_test_sessions={}\ntrain={}\ntest={}\n",
        report.train_sessions,
        report.test_sessions,
        report.filtered_events,
        report.dropped_test_sessions,
        train_path.display(),
        test_path.display()
    ))
}

pub fn cmd_synthesize(cfg: &RunConfig) -> Result<String> {
    let out = require(&cfg.paths.out, "out")?;
    let s = &cfg.synthesize;
    if s.items < 2 {
        return Err(Error::Config("synthetic corpora need at least two items".into()));
    }
    if s.min_len < 1 || s.min_len > s.max_len {
        return Err(Error::Config(format!("invalid length range {}..={}", s.min_len, s.max_len)));
    }
    if s.kind == SynthKind::Markov && (s.fanout < 1 || s.fanout > s.items) {
        return Err(Error::Config(format!("fanout {} outside 1..={}", s.fanout, s.items)));
    }
    let transition = match s.kind {
        SynthKind::Uniform => Transition::Uniform,
        SynthKind::Cyclic => Transition::Cyclic,
        SynthKind::Markov => Transition::Markov(data::sparse_markov(s.items, s.fanout, s.seed ^ 0x9e37_79b9)),
    };
    let corpus = data::synthetic_corpus(&SyntheticSpec {
        num_items: s.items,
        num_sessions: s.sessions,
        min_len: s.min_len,
        max_len: s.max_len,
        transition,
        seed: s.seed,
    });
    data::write_corpus(&corpus, &out)?;
    Ok(format!(
        "sessions={} items={} events={}\n",
        corpus.sessions.len(),
        corpus.vocab.len(),
        corpus.num_events()
    ))
}

#[derive(Serialize)]
struct EpochLogLine {
    epoch: u64,
    mean_loss: f64,
    mean_kl: f64,
    mean_objective: f64,
    events: usize,
    skipped_updates: usize,
    wall_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    valid_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    valid_mrr: Option<f64>,
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<Checkpoint>, exec: Execution) -> Result<String> {
    let corpus_path = require(&cfg.paths.corpus, "corpus")?;
    let ckpt_path = require(&cfg.paths.checkpoint, "checkpoint")?;
    let log_path = cfg
        .paths
        .log
        .clone()
        .unwrap_or_else(|| prefixed(&ckpt_path, ".log.jsonl"));
    let corpus = data::read_corpus(&corpus_path)?;
    let valid = cfg.paths.valid.as_deref().map(data::read_corpus).transpose()?;
    if let Some(v) = &valid {
        check_vocab(&corpus.vocab, &v.vocab, "validation corpus")?;
    }
    let train_cfg: TrainConfig = cfg.train.clone();
    let mut state = match resume {
        Some(ck) => {
            check_vocab(&ck.vocab, &corpus.vocab, "training corpus")?;
            if ck.config.latent_dim != train_cfg.latent_dim {
                return Err(Error::Config("latent_dim cannot change when resuming".into()));
            }
            ck.state
        }
        None => TrainState::new(&train_cfg, corpus.vocab.len()),
    };

    let mut log_text = String::new();
    let mut last = None;
    let started = Instant::now();
    let reports = trainer::train(&mut state, &corpus.sessions, &train_cfg, exec, |r, st| {
        let (valid_recall, valid_mrr) = match &valid {
            Some(v) => {
                let rep = eval::evaluate(&st.model, &v.sessions, &cfg.evaluate, exec);
                (Some(rep.recall_at_k), Some(rep.mrr_at_k))
            }
            None => (None, None),
        };
        let line = EpochLogLine {
            epoch: r.epoch,
            mean_loss: r.mean_loss,
            mean_kl: r.mean_kl,
            mean_objective: r.mean_objective,
            events: r.events,
            skipped_updates: r.skipped_updates,
            wall_seconds: started.elapsed().as_secs_f64(),
            valid_recall,
            valid_mrr,
        };
        let json = serde_json::to_string(&line).expect("serializable log line");
        info!("{json}");
        log_text.push_str(&json);
        log_text.push('\n');
        last = Some(r.clone());
    })?;
    if !state.model.is_finite() {
        return Err(Error::Numeric("training produced non-finite weights".into()));
    }
    let ck = Checkpoint {
        config: train_cfg,
        vocab: corpus.vocab,
        state,
    };
    ck.save(&ckpt_path)?;
    crate::write_atomic(&log_path, log_text.as_bytes())?;
    let mut out = format!("epochs={} checkpoint={}\n", reports.len(), ckpt_path.display());
    if let Some(r) = last {
        out.push_str(&format!("final_mean_loss={:.6} final_mean_kl={:.6}\n", r.mean_loss, r.mean_kl));
    }
    Ok(out)
}

fn check_vocab(expected: &data::ItemVocab, got: &data::ItemVocab, what: &str) -> Result<()> {
    if expected == got {
        return Ok(());
    }
    let first_diff = expected
        .raw_ids()
        .iter()
        .zip(got.raw_ids())
        .position(|(a, b)| a != b);
    let detail = match first_diff {
        Some(i) => format!(
            "index {i} is `{}` in the checkpoint but `{}` in the {what}",
            expected.raw_ids()[i],
            got.raw_ids()[i]
        ),
        None => format!("checkpoint has {} items, {what} has {}", expected.len(), got.len()),
    };
    Err(Error::Data(format!("vocabulary mismatch: {detail}")))
}

pub fn cmd_evaluate(cfg: &RunConfig, exec: Execution) -> Result<String> {
    let corpus_path = require(&cfg.paths.corpus, "corpus")?;
    let ckpt_path = require(&cfg.paths.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(&ckpt_path)?;
    let corpus = data::read_corpus(&corpus_path)?;
    check_vocab(&ck.vocab, &corpus.vocab, "evaluation corpus")?;
    let report = eval::evaluate(&ck.state.model, &corpus.sessions, &cfg.evaluate, exec);
    let text = report.to_text();
    if let Some(prefix) = &cfg.paths.out {
        crate::write_atomic(&prefixed(prefix, ".txt"), text.as_bytes())?;
        crate::write_atomic(&prefixed(prefix, ".jsonl"), report.to_jsonl().as_bytes())?;
    }
    Ok(text)
}

pub fn cmd_recommend(cfg: &RunConfig, items: &[String]) -> Result<String> {
    let ckpt_path = require(&cfg.paths.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(&ckpt_path)?;
    let idx = items
        .iter()
        .map(|raw| {
            ck.vocab
                .index(raw)
                .ok_or_else(|| Error::Data(format!("unknown item id `{raw}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let recs = eval::recommend(&ck.state.model, &idx, cfg.evaluate.k, &cfg.evaluate);
    Ok(recs
        .into_iter()
        .map(|(j, s)| format!("{}\t{s:.6}\n", ck.vocab.raw(j).unwrap_or("?")))
        .collect())
}

//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::codec::{spans_to_tags, CharSpan};
use crate::data::{self, generate_corpus, CorpusSpec, DataFormat, MrcExample};
use crate::error::{Error, Result};
use crate::head::HeadKind;
use crate::metrics::{evaluate, read_predictions, write_predictions, DatasetKind, Prediction};
use crate::plm::{Checkpoint, PromptOrdering};
use crate::text::{char_len, char_slice, tokenize};
use crate::trainer::{
    check_compatible, infer, parse_beta_grid, report_params, sweep_beta, sweep_table, train_with, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "qase", version, about = "Question-attended span extraction for generative readers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus as JSONL.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file against a dataset.
    Eval(EvalArgs),
    /// Generate answers with a checkpoint.
    Infer(InferArgs),
    /// Print the IO tags for character spans of a context.
    Tag(TagArgs),
    /// Print trainable parameter counts.
    Params(ParamsArgs),
    /// Train and evaluate over a grid of beta values.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output JSONL file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 48)]
    pub n_examples: usize,
    #[arg(long, default_value_t = 0.0)]
    pub multi_span_fraction: f64,
    /// Longest answer phrase, in words.
    #[arg(long, default_value_t = 2)]
    pub max_phrase_len: usize,
    #[arg(long, default_value_t = 8)]
    pub words_per_category: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Overrides for fields of the training config.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// qase, baseline or none.
    #[arg(long)]
    pub head: Option<HeadKind>,
    /// context-first or question-first.
    #[arg(long)]
    pub ordering: Option<PromptOrdering>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Enable LoRA adapters and freeze the base generator.
    #[arg(long)]
    pub lora: bool,
    #[arg(long)]
    pub lora_rank: Option<usize>,
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    #[arg(long)]
    pub lora_dropout: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Residual dropout inside the generator.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub head_width: Option<usize>,
    #[arg(long)]
    pub head_heads: Option<usize>,
    #[arg(long)]
    pub max_answer_len: Option<usize>,
    /// Run every epoch even if the loss plateaus.
    #[arg(long)]
    pub no_early_stop: bool,
    #[arg(long)]
    pub multi_span_prompt: Option<bool>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_toml_file(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field { cfg.$field = v; }
            )*};
        }
        set!(seed, beta, head, ordering, learning_rate, epochs, batch_size, d_model, n_layers, n_heads, d_ff, max_seq_len, max_answer_len, head_heads, dropout, weight_decay);
        if self.head_width.is_some() {
            cfg.head_width = self.head_width;
        }
        if self.multi_span_prompt.is_some() {
            cfg.multi_span_prompt = self.multi_span_prompt;
        }
        if self.vocab_size.is_some() {
            cfg.vocab_size = self.vocab_size;
        }
        if self.lora {
            cfg.lora.enabled = true;
        }
        if let Some(r) = self.lora_rank {
            cfg.lora.rank = r;
        }
        if let Some(a) = self.lora_alpha {
            cfg.lora.alpha = a;
        }
        if let Some(p) = self.lora_dropout {
            cfg.lora.dropout = p;
        }
        if self.no_early_stop {
            cfg.early_stop = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// squad, multispan, quoref or jsonl.
    #[arg(long, default_value = "jsonl")]
    pub format: DataFormat,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch JSONL log; written to stderr when absent.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to generate predictions with.
    #[arg(long, conflicts_with = "preds", required_unless_present = "preds")]
    pub ckpt: Option<PathBuf>,
    /// Existing predictions JSONL to score instead of a checkpoint.
    #[arg(long)]
    pub preds: Option<PathBuf>,
    /// Prompt ordering; defaults to the checkpoint's.
    #[arg(long)]
    pub ordering: Option<PromptOrdering>,
    /// squad, quoref, multispan or synthetic; defaults from --format.
    #[arg(long)]
    pub kind: Option<DatasetKind>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Config to check the checkpoint against.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Prompt ordering; defaults to the checkpoint's.
    #[arg(long)]
    pub ordering: Option<PromptOrdering>,
    /// Predictions JSONL; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TagArgs {
    #[arg(long)]
    pub context: String,
    /// Comma-separated character spans `start:end` (end exclusive).
    #[arg(long, default_value = "")]
    pub spans: String,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset whose vocabulary sizes the embedding table.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "jsonl")]
    pub format: DataFormat,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Held-out dataset (same format as --data).
    #[arg(long)]
    pub dev: PathBuf,
    /// `lo:hi:step` inclusive, or a comma-separated list.
    #[arg(long, default_value = "1.0")]
    pub beta_grid: String,
    /// Comma-separated head kinds to compare.
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub kind: Option<DatasetKind>,
    /// Table file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn default_kind(format: DataFormat) -> DatasetKind {
    match format {
        DataFormat::Squad => DatasetKind::Squad,
        DataFormat::Quoref => DatasetKind::Quoref,
        DataFormat::Multispan => DatasetKind::Multispan,
        DataFormat::Jsonl => DatasetKind::Synthetic,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn emit(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn load(args: &DataArgs) -> Result<Vec<MrcExample>> {
    data::load(&args.data, args.format)
}

fn predictions_jsonl(preds: &[Prediction]) -> String {
    preds
        .iter()
        .map(|p| serde_json::to_string(p).expect("prediction serializes") + "\n")
        .collect()
}

/// Parses `a:b,c:d` into character spans of `context`.
pub fn parse_spans(spec: &str, context: &str) -> Result<Vec<CharSpan>> {
    let mut spans = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::Input(format!("invalid span {part:?}; expected start:end"));
        let (a, b) = part.split_once(':').ok_or_else(bad)?;
        let start: usize = a.trim().parse().map_err(|_| bad())?;
        let end: usize = b.trim().parse().map_err(|_| bad())?;
        let text = char_slice(context, start, end).unwrap_or_default();
        let span = CharSpan { start, end, text };
        span.validate(context)?;
        spans.push(span);
    }
    Ok(spans)
}

fn run_command(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData(a) => {
            let spec = CorpusSpec {
                n_examples: a.n_examples,
                multi_span_fraction: a.multi_span_fraction,
                answer_len: (1, a.max_phrase_len),
                words_per_category: a.words_per_category,
                seed: a.seed,
                ..CorpusSpec::default()
            };
            let corpus = generate_corpus(&spec)?;
            data::write_jsonl(&a.out, &corpus)
        }
        Command::Train(a) => {
            let cfg = a.config.resolve()?;
            let corpus = load(&a.data)?;
            let mut log = String::new();
            let outcome = train_with(&corpus, &cfg, |entry| {
                let line = serde_json::to_string(entry).expect("log serializes") + "\n";
                if a.log.is_none() {
                    let _ = err.write_all(line.as_bytes());
                }
                log.push_str(&line);
            })?;
            if let Some(path) = &a.log {
                write_file(path, log.as_bytes())?;
            }
            outcome.checkpoint().save(&a.out)
        }
        Command::Eval(a) => {
            let examples = load(&a.data)?;
            let kind = a.kind.unwrap_or(default_kind(a.data.format));
            let preds = match (&a.ckpt, &a.preds) {
                (Some(path), _) => {
                    let ckpt = Checkpoint::load(path)?;
                    if let Some(cfg) = &a.config {
                        check_compatible(&ckpt, &TrainConfig::from_toml_file(cfg)?)?;
                    }
                    let ordering = a.ordering.unwrap_or(ckpt.manifest.template.ordering);
                    infer(&ckpt, &examples, ordering)?
                }
                (None, Some(path)) => read_predictions(path)?,
                (None, None) => return Err(Error::Input("either --ckpt or --preds is required".into())),
            };
            let report = evaluate(&preds, &examples, kind)?;
            emit(a.report.as_deref(), &report.to_text(), out)
        }
        Command::Infer(a) => {
            let examples = load(&a.data)?;
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let ordering = a.ordering.unwrap_or(ckpt.manifest.template.ordering);
            let preds = infer(&ckpt, &examples, ordering)?;
            match &a.out {
                Some(path) => write_predictions(path, &preds),
                None => emit(None, &predictions_jsonl(&preds), out),
            }
        }
        Command::Tag(a) => {
            let spans = parse_spans(&a.spans, &a.context)?;
            let offsets: Vec<(usize, usize)> = tokenize(&a.context).iter().map(|t| (t.start, t.end)).collect();
            let tags = spans_to_tags(&offsets, &spans, char_len(&a.context))?;
            emit(None, &format!("{tags}\n"), out)
        }
        Command::Params(a) => {
            let cfg = a.config.resolve()?;
            let vocab_size = match &a.data {
                Some(path) => {
                    let corpus = data::load(path, a.format)?;
                    crate::trainer::Model::for_corpus(&cfg, &corpus)?.vocab.len()
                }
                None => cfg
                    .vocab_size
                    .ok_or_else(|| Error::Config("params needs --data or vocab_size".into()))?,
            };
            let r = report_params(&cfg, vocab_size)?;
            emit(None, &format!("base={}\nwith_head={}\ndelta={}\n", r.base, r.with_head, r.delta), out)
        }
        Command::Sweep(a) => {
            let cfg = a.config.resolve()?;
            let grid = parse_beta_grid(&a.beta_grid)?;
            let heads: Vec<HeadKind> = match &a.heads {
                Some(list) => list.split(',').map(|h| h.trim().parse()).collect::<Result<_>>()?,
                None => vec![cfg.head],
            };
            let train_set = load(&a.data)?;
            let dev_set = data::load(&a.dev, a.data.format)?;
            let kind = a.kind.unwrap_or(default_kind(a.data.format));
            let rows = sweep_beta(&train_set, &dev_set, &cfg, &grid, &heads, kind)?;
            emit(a.out.as_deref(), &sweep_table(&rows), out)
        }
    }
}

/// Runs the CLI. Returns 0 on success, 1 on invalid input and 2 on
/// runtime failure.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    match run_command(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

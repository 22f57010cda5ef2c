//! Command-line surface. Flags override the matching config-file values.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use mgcrs_core::corpus::Task;
use mgcrs_core::pipeline::StageSource;

#[derive(Debug, Parser)]
#[command(name = "mgcrs", version, about = "Multi-goal conversational recommendation")]
pub struct Cli {
    /// TOML configuration file; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a dataset into the canonical JSONL corpus format.
    Ingest(IngestArgs),
    /// Generate a synthetic corpus with known ground truth.
    Synth(SynthArgs),
    /// Multi-task training of the shared model into a new experiment.
    Train(TrainArgs),
    /// Prompt-tune task-specific models from the shared model.
    Tune(TuneArgs),
    /// Run the goal, topic, item and response stages over a corpus.
    Infer(InferArgs),
    /// Score a predictions file against a gold corpus.
    Eval(EvalArgs),
    /// Run an ablation suite and write the comparison table.
    Ablate(AblateArgs),
    /// Serve the pipeline over HTTP.
    Serve(ServeArgs),
    /// Talk to the pipeline in the terminal.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArg {
    /// Corpus file (canonical JSONL unless `--format` says otherwise).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "canonical_jsonl")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Source format: canonical_jsonl, durecdial or tgredial.
    #[arg(long)]
    pub format: String,
    /// Dataset file or directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Output corpus file; the label sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the corpus even when validation reports violations.
    #[arg(long)]
    pub allow_violations: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Overrides `synth.n_dialogues`.
    #[arg(long)]
    pub dialogues: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the last `--holdout` dialogues here, removed from `--out`.
    #[arg(long, requires = "holdout")]
    pub test_out: Option<PathBuf>,
    #[arg(long, requires = "test_out")]
    pub holdout: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// Experiment directory to create.
    #[arg(long)]
    pub exp: PathBuf,
    /// Optional dev corpus for per-epoch dev loss.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Train four single-task models from scratch instead of the shared one.
    #[arg(long)]
    pub independent: bool,
    /// Overrides `train.e1`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// `all` or one task letter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSelection(pub Vec<Task>);

impl FromStr for TaskSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TaskSelection(Task::ALL.to_vec()));
        }
        s.split(',')
            .map(|t| t.trim().parse::<Task>().map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()
            .map(TaskSelection)
    }
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long)]
    pub exp: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// `all`, or a comma-separated list of G, T, R, D.
    #[arg(long, default_value = "all")]
    pub task: TaskSelection,
    /// Overrides `train.e2`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// `model`, `oracle`, `skip` or `external:PATH`.
pub fn parse_source(s: &str) -> Result<StageSource, String> {
    match s {
        "model" => Ok(StageSource::Model),
        "oracle" => Ok(StageSource::Oracle),
        "skip" => Ok(StageSource::Skip),
        _ => match s.strip_prefix("external:") {
            Some(path) if !path.is_empty() => Ok(StageSource::External(path.to_string())),
            _ => Err(format!("`{s}` is not one of model, oracle, skip, external:PATH")),
        },
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long)]
    pub exp: PathBuf,
    /// Predictions JSONL to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "model", value_parser = parse_source)]
    pub goal: StageSource,
    #[arg(long, default_value = "model", value_parser = parse_source)]
    pub topic: StageSource,
    #[arg(long, default_value = "model", value_parser = parse_source)]
    pub item: StageSource,
    #[arg(long, default_value = "model", value_parser = parse_source)]
    pub response: StageSource,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// Experiment whose response model scores perplexity.
    #[arg(long)]
    pub exp: Option<PathBuf>,
    /// Report file; `<out>.json` and `<out>.txt` are written.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long)]
    pub exp: PathBuf,
    /// JSON list of `{name, overrides}`; the default suite when absent.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Report file; `<out>.json` and `<out>.txt` are written.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub exp: PathBuf,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub exp: PathBuf,
}

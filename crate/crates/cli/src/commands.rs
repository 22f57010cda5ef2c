//! Implementations of the subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use mgcrs_core::backbone::Backbone;
use mgcrs_core::corpus::{
    corpus_digest, derive_turns, generate_synthetic, load_corpus, save_corpus, validate_corpus, Corpus, CorpusFormat,
    Split, Task,
};
use mgcrs_core::metrics::evaluate;
use mgcrs_core::pipeline::{
    ablation_table, default_ablation_suite, read_predictions, response_perplexity, write_predictions, NamedOverride,
    Pipeline, PipelineConfig, StageModels, StageOverride,
};
use mgcrs_core::train::{
    ablation_variant, corpus_vocabulary, multitask_train, prompt_tune, task_checkpoint_name, AblationVariant,
    CheckpointSet, EpochRecord, Experiment, ExperimentConfig,
};
use mgcrs_core::Error as CoreError;

use crate::cli::*;
use crate::config::AppConfig;
use crate::service::{Service, ServiceError};

/// Errors raised by the command layer itself.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("corpus has {count} validation violations; first: {first}")]
    Validation { count: usize, first: String },
}

/// Stable kind of the first recognizable error in the chain.
pub fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CoreError>() {
            return c.kind();
        }
        if let Some(c) = cause.downcast_ref::<ServiceError>() {
            return c.kind();
        }
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return match c {
                CliError::Validation { .. } => "validation",
            };
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<toml::de::Error>() {
            return "config";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
    }
    "error"
}

/// The one-line error report printed on failure.
pub fn error_line(e: &anyhow::Error) -> String {
    let message = format!("{e:#}").split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error[{}]: {message}", error_kind(e))
}

pub fn run(cli: Cli) -> Result<()> {
    let app = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(a) => ingest(&a),
        Command::Synth(a) => synth(&app, &a),
        Command::Train(a) => train(&app, &a),
        Command::Tune(a) => tune(&a),
        Command::Infer(a) => infer(&app, &a),
        Command::Eval(a) => eval(&app, &a),
        Command::Ablate(a) => ablate(&app, &a),
        Command::Serve(a) => serve(&app, &a),
        Command::Chat(a) => {
            let svc = Arc::new(Service::new(Arc::new(load_pipeline(&a.exp, &app)?), app.serve.clone()));
            crate::chat::repl(svc, std::io::stdin().lock(), std::io::stdout())
        }
    }
}

fn read_corpus(path: &Path, format: &str) -> Result<Corpus> {
    let format: CorpusFormat = format.parse()?;
    Ok(load_corpus(path, format)?)
}

fn corpus_arg(a: &CorpusArg) -> Result<Corpus> {
    read_corpus(&a.corpus, &a.format)
}

fn require_clean(c: &Corpus) -> Result<()> {
    let report = validate_corpus(c);
    if let Some(v) = report.violations.first() {
        return Err(CliError::Validation {
            count: report.violations.len(),
            first: format!(
                "{:?} in {} turn {}: {}",
                v.kind,
                v.dialogue_id.as_deref().unwrap_or("-"),
                v.turn_index.map_or("-".into(), |t| t.to_string()),
                v.detail
            ),
        }
        .into());
    }
    Ok(())
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let corpus = read_corpus(&a.input, &a.format)?;
    let report = validate_corpus(&corpus);
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    println!("violations: {}", report.violations.len());
    if !a.allow_violations {
        require_clean(&corpus)?;
    }
    save_corpus(&corpus, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn synth(app: &AppConfig, a: &SynthArgs) -> Result<()> {
    let mut cfg = app.synth;
    if let Some(n) = a.dialogues {
        cfg.n_dialogues = n;
    }
    if cfg.n_dialogues == 0 || cfg.n_goals == 0 || cfg.n_topics == 0 || cfg.n_items == 0 || cfg.turns_per_dialogue == 0 {
        return Err(CoreError::Config("synthetic counts must all be at least 1".into()).into());
    }
    let corpus = generate_synthetic(a.seed, &cfg);
    match (&a.test_out, a.holdout) {
        (Some(test_out), Some(n)) => {
            if n == 0 || n >= corpus.dialogues.len() {
                return Err(CoreError::Config(format!(
                    "holdout {n} must be between 1 and {}",
                    corpus.dialogues.len() - 1
                ))
                .into());
            }
            let (train, test) = corpus.split_tail(n);
            save_corpus(&train, &a.out)?;
            save_corpus(&test, test_out)?;
            println!("wrote {} ({} dialogues)", a.out.display(), train.dialogues.len());
            println!("wrote {} ({} dialogues)", test_out.display(), test.dialogues.len());
        }
        _ => {
            save_corpus(&corpus, &a.out)?;
            println!("wrote {} ({} dialogues)", a.out.display(), corpus.dialogues.len());
        }
    }
    Ok(())
}

/// Epoch hook that mirrors records into the experiment's metrics log.
fn recorder(exp: &Experiment) -> (impl FnMut(&EpochRecord) + '_, std::rc::Rc<std::cell::RefCell<Option<CoreError>>>) {
    let failure = std::rc::Rc::new(std::cell::RefCell::new(None));
    let slot = failure.clone();
    let hook = move |r: &EpochRecord| {
        println!(
            "{:?} epoch {} loss {:.4}{} ({:.1}s)",
            r.stage,
            r.epoch,
            r.train_loss,
            r.dev_loss.map_or(String::new(), |d| format!(" dev {d:.4}")),
            r.seconds
        );
        if let Err(e) = exp.record_epoch(r) {
            slot.borrow_mut().get_or_insert(e);
        }
    };
    (hook, failure)
}

fn train(app: &AppConfig, a: &TrainArgs) -> Result<()> {
    let mut tc = app.train.clone();
    if let Some(e) = a.epochs {
        tc.e1 = e;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    tc.validate()?;
    app.backbone.validate(&tc.budget)?;
    if a.exp.join("config.json").exists() {
        return Err(CoreError::Config(format!("experiment {} already exists", a.exp.display())).into());
    }
    let corpus = corpus_arg(&a.corpus)?;
    require_clean(&corpus)?;
    let dev = a.dev.as_deref().map(|p| read_corpus(p, &a.corpus.format)).transpose()?;
    let exp = Experiment::create(
        &a.exp,
        &ExperimentConfig {
            backbone: app.backbone.clone(),
            train: tc.clone(),
        },
        &corpus,
    )?;
    let vocab = Arc::new(corpus_vocabulary(&corpus, tc.min_word_count)?);
    exp.log(&format!("vocabulary {} tokens, digest {}", vocab.len(), vocab.digest()))?;
    let (mut hook, failure) = recorder(&exp);
    if a.independent {
        // Each task model trains for e1 + e2 epochs from scratch.
        let (set, _) = ablation_variant(&corpus, vocab, &app.backbone, &tc, AblationVariant::NoMtl, &mut hook)?;
        set.save(&exp.checkpoints_dir())?;
        for m in set.all() {
            exp.log(&format!("checkpoint {} digest {}", m.name, m.digest()))?;
        }
    } else {
        let (theta, _) = multitask_train(&corpus, vocab, &app.backbone, &tc, dev.as_ref(), &mut hook)?;
        theta.snapshot(&exp.checkpoint_dir(&theta.name))?;
        exp.log(&format!("checkpoint {} digest {}", theta.name, theta.digest()))?;
    }
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e.into());
    }
    println!("experiment written to {}", a.exp.display());
    Ok(())
}

fn tune(a: &TuneArgs) -> Result<()> {
    let exp = Experiment::open(&a.exp)?;
    let mut tc = exp.config()?.train;
    if let Some(e) = a.epochs {
        tc.e2 = e;
    }
    let corpus = corpus_arg(&a.corpus)?;
    let expected = exp.corpus_digest()?;
    let found = corpus_digest(&corpus)?;
    if expected != found {
        return Err(CoreError::DigestMismatch { expected, found }).context("tuning corpus differs from the training corpus");
    }
    let dev = a.dev.as_deref().map(|p| read_corpus(p, &a.corpus.format)).transpose()?;
    let theta_dir = exp.checkpoint_dir("theta");
    if !theta_dir.join("config.json").exists() {
        return Err(CoreError::Checkpoint(format!("no shared model under {}", theta_dir.display())).into());
    }
    let theta: Backbone = Backbone::restore(&theta_dir)?;
    let (mut hook, failure) = recorder(&exp);
    for &task in &a.task.0 {
        let (m, _) = prompt_tune(&theta, task, &corpus, &tc, dev.as_ref(), &mut hook)?;
        m.snapshot(&exp.checkpoint_dir(&task_checkpoint_name(task)))?;
        exp.log(&format!("checkpoint {} digest {}", m.name, m.digest()))?;
    }
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e.into());
    }
    Ok(())
}

/// Builds the inference pipeline of an experiment. Prompt strategy and
/// length budget come from the experiment so inputs match training.
pub fn load_pipeline(exp_dir: &Path, app: &AppConfig) -> Result<Pipeline> {
    let exp = Experiment::open(exp_dir)?;
    let trained = exp.config()?.train;
    let set = CheckpointSet::load(&exp.checkpoints_dir())?;
    let vocab = set.all().next().expect("checkpoint set is non-empty").vocab.clone();
    let cfg = PipelineConfig {
        strategy: trained.strategy,
        budget: trained.budget,
        ..app.pipeline.clone()
    };
    Ok(Pipeline::new(StageModels::from_checkpoints(&set), cfg, exp.catalog()?, vocab)?)
}

fn infer(app: &AppConfig, a: &InferArgs) -> Result<()> {
    let corpus = corpus_arg(&a.corpus)?;
    let mut pipeline = load_pipeline(&a.exp, app)?;
    let ov = StageOverride {
        goal: a.goal.clone(),
        topic: a.topic.clone(),
        item: a.item.clone(),
        response: a.response.clone(),
    };
    ov.validate()?;
    pipeline.load_externals(&ov)?;
    let preds = pipeline.run_corpus(&corpus, &ov)?;
    write_predictions(&preds, &a.out)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn report_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.with_extension("json"), out.with_extension("txt"))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn eval(app: &AppConfig, a: &EvalArgs) -> Result<()> {
    let preds = read_predictions(&a.preds)?;
    let corpus = corpus_arg(&a.corpus)?;
    let mut opts = app.report.clone();
    if let Some(exp) = &a.exp {
        let pipeline = load_pipeline(exp, app)?;
        let model = pipeline
            .models
            .response
            .clone()
            .ok_or_else(|| CoreError::MissingModel(Task::D.to_string()))?;
        opts.ppl = response_perplexity(model.as_ref(), &preds, &derive_turns(&corpus))?;
    }
    let report = evaluate(&preds, &corpus, &opts)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        let (json, txt) = report_paths(out);
        write_file(&json, &report.to_json()?)?;
        write_file(&txt, &text)?;
    }
    Ok(())
}

fn ablate(app: &AppConfig, a: &AblateArgs) -> Result<()> {
    let corpus = corpus_arg(&a.corpus)?;
    if corpus.split != Split::Test {
        eprintln!("warning: ablating on a corpus whose split is {:?}", corpus.split);
    }
    let suite: Vec<NamedOverride> = match &a.suite {
        Some(p) => {
            let raw = fs::read_to_string(p).with_context(|| format!("reading suite {}", p.display()))?;
            serde_json::from_str(&raw).with_context(|| format!("parsing suite {}", p.display()))?
        }
        None => default_ablation_suite(),
    };
    let mut pipeline = load_pipeline(&a.exp, app)?;
    let rows = pipeline.run_ablation(&corpus, &suite)?;
    let table = ablation_table(&rows);
    print!("{table}");
    let (json, txt) = report_paths(&a.out);
    write_file(&json, &serde_json::to_string_pretty(&rows)?)?;
    write_file(&txt, &table)?;
    Ok(())
}

fn serve(app: &AppConfig, a: &ServeArgs) -> Result<()> {
    let mut cfg = app.serve.clone();
    if let Some(h) = &a.host {
        cfg.host = h.clone();
    }
    if let Some(p) = a.port {
        cfg.port = p;
    }
    let svc = Arc::new(Service::new(Arc::new(load_pipeline(&a.exp, app)?), cfg));
    tokio::runtime::Runtime::new()?.block_on(crate::server::serve(svc))
}

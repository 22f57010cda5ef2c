//! Two-stage training: shuffled multi-task training over the pooled task
//! datasets, then per-task prompt tuning of cloned parameters.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, OptimConfig, TrainState};
use crate::corpus::{corpus_digest, derive_examples, Corpus, Item, Task, TaskExample};
use crate::error::{Error, Result};
use crate::serialize::{build_input, serialize_examples, LengthBudget, PromptStrategy, SerializedPair, StageValues};
use crate::vocab::{build_vocabulary, BaseTokenizer, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Multi-task epochs.
    pub e1: usize,
    /// Prompt-tuning epochs per task.
    pub e2: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub strategy: PromptStrategy,
    pub budget: LengthBudget,
    /// Words rarer than this fall back to character pieces.
    pub min_word_count: usize,
    /// Probability of dropping each upstream segment (goal, topic, item)
    /// from a T, R or D training input, so the models also learn inputs in
    /// which a stage was skipped. `0` trains on complete inputs only.
    pub segment_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            e1: 15,
            e2: 5,
            batch_size: 32,
            optim: OptimConfig::default(),
            seed: 0,
            strategy: PromptStrategy::default(),
            budget: LengthBudget::default(),
            min_word_count: 1,
            segment_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.segment_dropout) {
            return Err(Error::Config(format!("segment dropout {} outside [0, 1)", self.segment_dropout)));
        }
        self.budget.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Multitask,
    PromptTune(Task),
    /// From-scratch single-task training (the no-MTL ablation).
    Independent(Task),
}

impl Stage {
    fn seed_salt(self) -> u64 {
        match self {
            Stage::Multitask => 0,
            Stage::PromptTune(t) => 1 + t.index() as u64,
            Stage::Independent(t) => 5 + t.index() as u64,
        }
    }
}

/// Per-epoch record, also the line format of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub stage: Stage,
    pub epoch_losses: Vec<f64>,
    pub dev_losses: Vec<f64>,
    pub seconds: f64,
    pub checkpoint: String,
}

/// Checkpoint name of a task-specific model.
pub fn task_checkpoint_name(task: Task) -> String {
    format!("theta_{task}")
}

/// Vocabulary over every text field of `corpus` plus its item catalog.
pub fn corpus_vocabulary(corpus: &Corpus, min_word_count: usize) -> Result<Vocabulary> {
    build_vocabulary(&BaseTokenizer::from_corpus(corpus, min_word_count), &corpus.item_catalog)
}

/// Oracle conditioning of `ex` with each upstream segment of its task
/// independently dropped with probability `p`.
fn dropped_upstream(ex: &TaskExample, p: f64, rng: &mut ChaCha8Rng) -> StageValues {
    let mut up = StageValues::oracle(&ex.sample);
    let mut drop = || rng.gen_bool(p);
    if ex.task != Task::G && drop() {
        up.goals.clear();
    }
    if matches!(ex.task, Task::R | Task::D) && drop() {
        up.topics.clear();
    }
    if ex.task == Task::D && drop() {
        up.item = None;
    }
    up
}

/// Tokenized training pairs of one task, inputs built from oracle labels
/// (with segment dropout when configured).
pub fn task_pairs(corpus: &Corpus, vocab: &Vocabulary, task: Task, tc: &TrainConfig) -> Result<Vec<SerializedPair>> {
    let examples = derive_examples(corpus, task);
    let mut pairs = if tc.segment_dropout > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ (0x5eed_0000 + task.index() as u64));
        examples
            .iter()
            .map(|ex| {
                let up = dropped_upstream(ex, tc.segment_dropout, &mut rng);
                let input = build_input(task, &ex.sample, tc.strategy, &tc.budget, &up, vocab)?;
                Ok(SerializedPair::new(task, input, ex.target_text.clone()))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        serialize_examples(&examples, tc.strategy, &tc.budget, vocab)?
    };
    for p in &mut pairs {
        p.tokenize(vocab, &tc.budget);
    }
    Ok(pairs)
}

/// Tokenized pairs of all four tasks, in task order.
pub fn pooled_pairs(corpus: &Corpus, vocab: &Vocabulary, tc: &TrainConfig) -> Result<Vec<SerializedPair>> {
    let mut all = Vec::new();
    for task in Task::ALL {
        all.extend(task_pairs(corpus, vocab, task, tc)?);
    }
    Ok(all)
}

/// Observer of finished epochs.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Hook that ignores every epoch.
pub fn no_hook(_: &EpochRecord) {}

/// Runs `epochs` passes over `pairs`, reshuffled every epoch. The loss of an
/// epoch is the token-weighted mean of its batch losses.
pub fn fit(
    model: &mut Backbone,
    pairs: &[SerializedPair],
    dev: &[SerializedPair],
    epochs: usize,
    stage: Stage,
    tc: &TrainConfig,
    hook: EpochHook<'_>,
) -> Result<TrainRun> {
    tc.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!("no training pairs for stage {stage:?}")));
    }
    let start = Instant::now();
    let seed = tc.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage.seed_salt());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TrainState::new(tc.optim, model.param_count(), seed ^ 0xD1B5_4A32_D192_ED03);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut run = TrainRun {
        stage,
        epoch_losses: Vec::with_capacity(epochs),
        dev_losses: Vec::new(),
        seconds: 0.0,
        checkpoint: model.name.clone(),
    };
    let mut batch: Vec<SerializedPair> = Vec::with_capacity(tc.batch_size);
    for epoch in 0..epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| pairs[i].clone()));
            let n: usize = batch.iter().map(|p| p.target_ids.len() + 1).sum();
            sum += model.train_batch(&batch, &mut state)? * n as f64;
            tokens += n;
        }
        let train_loss = sum / tokens as f64;
        run.epoch_losses.push(train_loss);
        let dev_loss = if dev.is_empty() { None } else { Some(mean_loss(model, dev, tc.batch_size)?) };
        run.dev_losses.extend(dev_loss);
        hook(&EpochRecord {
            stage,
            epoch,
            train_loss,
            dev_loss,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }
    run.seconds = start.elapsed().as_secs_f64();
    Ok(run)
}

/// Token-weighted mean loss over `pairs`, evaluated in batches.
pub fn mean_loss(model: &Backbone, pairs: &[SerializedPair], batch_size: usize) -> Result<f64> {
    let (sum, n) = summed_nll(model, pairs, batch_size)?;
    Ok(sum / n as f64)
}

/// Summed token NLL and token count over `pairs`.
pub fn summed_nll(model: &Backbone, pairs: &[SerializedPair], batch_size: usize) -> Result<(f64, usize)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no pairs to score".into()));
    }
    let (mut sum, mut n) = (0.0, 0);
    for chunk in pairs.chunks(batch_size.max(1)) {
        let (s, k) = model.nll(chunk)?;
        sum += s;
        n += k;
    }
    Ok((sum, n))
}

/// Multi-task stage: trains θ on the pooled pairs of all four tasks.
pub fn multitask_train(
    corpus: &Corpus,
    vocab: Arc<Vocabulary>,
    bc: &BackboneConfig,
    tc: &TrainConfig,
    dev: Option<&Corpus>,
    hook: EpochHook<'_>,
) -> Result<(Backbone, TrainRun)> {
    bc.validate(&tc.budget)?;
    let pairs = pooled_pairs(corpus, &vocab, tc)?;
    let dev_pairs = match dev {
        Some(d) => pooled_pairs(d, &vocab, tc)?,
        None => Vec::new(),
    };
    let mut theta = Backbone::new("theta", bc.clone(), vocab)?;
    let run = fit(&mut theta, &pairs, &dev_pairs, tc.e1, Stage::Multitask, tc, hook)?;
    Ok((theta, run))
}

/// Prompt-tuning stage: clones θ and tunes the clone on one task.
pub fn prompt_tune(
    theta: &Backbone,
    task: Task,
    corpus: &Corpus,
    tc: &TrainConfig,
    dev: Option<&Corpus>,
    hook: EpochHook<'_>,
) -> Result<(Backbone, TrainRun)> {
    let pairs = task_pairs(corpus, &theta.vocab, task, tc)?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!("task {task} has no training examples")));
    }
    let dev_pairs = match dev {
        Some(d) => task_pairs(d, &theta.vocab, task, tc)?,
        None => Vec::new(),
    };
    let mut tuned = theta.clone_as(task_checkpoint_name(task));
    let run = fit(&mut tuned, &pairs, &dev_pairs, tc.e2, Stage::PromptTune(task), tc, hook)?;
    Ok((tuned, run))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Multi-task training followed by prompt tuning.
    Full,
    /// Four independent single-task models trained from scratch.
    NoMtl,
    /// One multi-task model serving every task.
    NoPl,
}

/// Models produced by a training variant. `theta` is the shared multi-task
/// model when one exists; `tuned` holds task-specific models in task order.
#[derive(Debug, Clone)]
pub struct CheckpointSet {
    pub theta: Option<Backbone>,
    pub tuned: Vec<Backbone>,
}

impl CheckpointSet {
    /// Model used for `task`: the task-specific one when present, else θ.
    pub fn model_for(&self, task: Task) -> Option<&Backbone> {
        let name = task_checkpoint_name(task);
        self.tuned.iter().find(|m| m.name == name).or(self.theta.as_ref())
    }

    pub fn all(&self) -> impl Iterator<Item = &Backbone> {
        self.theta.iter().chain(&self.tuned)
    }

    pub fn len(&self) -> usize {
        self.all().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, checkpoints_dir: &Path) -> Result<()> {
        for m in self.all() {
            m.snapshot(&checkpoints_dir.join(&m.name))?;
        }
        Ok(())
    }

    /// Loads whichever of θ and the four task models exist under
    /// `checkpoints_dir`.
    pub fn load(checkpoints_dir: &Path) -> Result<Self> {
        let load = |name: &str| -> Result<Option<Backbone>> {
            let dir = checkpoints_dir.join(name);
            if dir.join("config.json").exists() {
                Backbone::restore(&dir).map(Some)
            } else {
                Ok(None)
            }
        };
        let theta = load("theta")?;
        let mut tuned = Vec::new();
        for task in Task::ALL {
            tuned.extend(load(&task_checkpoint_name(task))?);
        }
        let set = CheckpointSet { theta, tuned };
        if set.is_empty() {
            return Err(Error::Checkpoint(format!("no checkpoints under {}", checkpoints_dir.display())));
        }
        let digests: Vec<String> = set.all().map(|m| m.vocab.digest()).collect();
        if let Some(d) = digests.iter().find(|d| **d != digests[0]) {
            return Err(Error::DigestMismatch {
                expected: digests[0].clone(),
                found: d.clone(),
            });
        }
        Ok(set)
    }
}

/// Trains the checkpoint set of one variant.
pub fn ablation_variant(
    corpus: &Corpus,
    vocab: Arc<Vocabulary>,
    bc: &BackboneConfig,
    tc: &TrainConfig,
    variant: AblationVariant,
    hook: EpochHook<'_>,
) -> Result<(CheckpointSet, Vec<TrainRun>)> {
    let mut runs = Vec::new();
    match variant {
        AblationVariant::Full | AblationVariant::NoPl => {
            let (theta, run) = multitask_train(corpus, vocab, bc, tc, None, &mut *hook)?;
            runs.push(run);
            let mut tuned = Vec::new();
            if variant == AblationVariant::Full {
                for task in Task::ALL {
                    let (m, run) = prompt_tune(&theta, task, corpus, tc, None, &mut *hook)?;
                    tuned.push(m);
                    runs.push(run);
                }
            }
            Ok((
                CheckpointSet {
                    theta: Some(theta),
                    tuned,
                },
                runs,
            ))
        }
        AblationVariant::NoMtl => {
            bc.validate(&tc.budget)?;
            let mut tuned = Vec::new();
            for task in Task::ALL {
                let pairs = task_pairs(corpus, &vocab, task, tc)?;
                let mut m = Backbone::new(task_checkpoint_name(task), bc.clone(), vocab.clone())?;
                let run = fit(&mut m, &pairs, &[], tc.e1 + tc.e2, Stage::Independent(task), tc, &mut *hook)?;
                tuned.push(m);
                runs.push(run);
            }
            Ok((CheckpointSet { theta: None, tuned }, runs))
        }
    }
}

/// On-disk experiment layout: `config.json`, `corpus.sha256`,
/// `catalog.json`, `checkpoints/<name>/`, `metrics.jsonl` and `run.log`.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
}

impl Experiment {
    /// Creates (or reuses) the directory and records config and corpus
    /// digest.
    pub fn create(root: &Path, cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        let exp = Experiment { root: root.to_path_buf() };
        let p = root.join("config.json");
        fs::write(&p, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&p, e))?;
        let p = root.join("corpus.sha256");
        fs::write(&p, corpus_digest(corpus)? + "\n").map_err(|e| Error::io(&p, e))?;
        let p = root.join("catalog.json");
        fs::write(&p, serde_json::to_string_pretty(&corpus.item_catalog)?).map_err(|e| Error::io(&p, e))?;
        Ok(exp)
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("config.json").exists() {
            return Err(Error::Config(format!("{} is not an experiment directory", root.display())));
        }
        Ok(Experiment { root: root.to_path_buf() })
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        let p = self.root.join("config.json");
        let raw = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn corpus_digest(&self) -> Result<String> {
        let p = self.root.join("corpus.sha256");
        Ok(fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?.trim().to_string())
    }

    /// Item catalog of the training corpus, needed to render ranked items.
    pub fn catalog(&self) -> Result<Vec<Item>> {
        let p = self.root.join("catalog.json");
        let raw = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.checkpoints_dir().join(name)
    }

    fn append(&self, file: &str, line: &str) -> Result<()> {
        let p = self.root.join(file);
        let mut f: File = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&p, e))
    }

    pub fn record_epoch(&self, rec: &EpochRecord) -> Result<()> {
        self.append("metrics.jsonl", &serde_json::to_string(rec)?)
    }

    pub fn log(&self, message: &str) -> Result<()> {
        self.append("run.log", message)
    }

    pub fn epochs(&self) -> Result<Vec<EpochRecord>> {
        let p = self.root.join("metrics.jsonl");
        if !p.exists() {
            return Ok(Vec::new());
        }
        let raw = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        raw.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

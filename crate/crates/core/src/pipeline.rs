//! Sequential inference: goal → topic → item → response, each stage's
//! output conditioning the next stage's input, with per-stage substitution
//! of oracle labels, external predictions or nothing at all.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{DecodeConfig, Seq2Seq};
use crate::corpus::{derive_turns, Corpus, Item, Task, TurnSample};
use crate::error::{Error, Result};
use crate::metrics::{generation_score, perplexity_from_nll, GenerationScore, WordTokenization};
use crate::serialize::{
    build_input, parse_goal_output, parse_topic_output, LengthBudget, PromptStrategy, StageValues, TokenCount,
};
use crate::train::CheckpointSet;

/// Where a stage's output comes from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSource {
    #[default]
    Model,
    Oracle,
    /// Predictions JSONL file; looked up by dialogue id and turn index.
    External(String),
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOverride {
    pub goal: StageSource,
    pub topic: StageSource,
    pub item: StageSource,
    pub response: StageSource,
}

impl StageOverride {
    pub fn all(source: StageSource) -> Self {
        StageOverride {
            goal: source.clone(),
            topic: source.clone(),
            item: source.clone(),
            response: source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.response == StageSource::Skip {
            return Err(Error::Config("the response stage cannot be skipped".into()));
        }
        Ok(())
    }

    fn sources(&self) -> [&StageSource; 4] {
        [&self.goal, &self.topic, &self.item, &self.response]
    }
}

/// Named override configuration of an ablation suite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedOverride {
    pub name: String,
    pub overrides: StageOverride,
}

impl NamedOverride {
    pub fn new(name: &str, overrides: StageOverride) -> Self {
        NamedOverride {
            name: name.into(),
            overrides,
        }
    }
}

/// The default ablation suite: full pipeline, all-oracle conditioning,
/// context-only generation, and single-stage removals and oracle
/// substitutions.
pub fn default_ablation_suite() -> Vec<NamedOverride> {
    use StageSource::*;
    let model = StageOverride::default();
    let with = |f: &dyn Fn(&mut StageOverride)| {
        let mut o = model.clone();
        f(&mut o);
        o
    };
    vec![
        NamedOverride::new("full", model.clone()),
        NamedOverride::new(
            "oracle_gen",
            StageOverride {
                response: Model,
                ..StageOverride::all(Oracle)
            },
        ),
        NamedOverride::new(
            "direct_gen",
            StageOverride {
                response: Model,
                ..StageOverride::all(Skip)
            },
        ),
        NamedOverride::new("wo_goal", with(&|o| o.goal = Skip)),
        NamedOverride::new("wo_topic", with(&|o| o.topic = Skip)),
        NamedOverride::new("wo_item", with(&|o| o.item = Skip)),
        NamedOverride::new("oracle_goal", with(&|o| o.goal = Oracle)),
        NamedOverride::new("oracle_topic", with(&|o| o.topic = Oracle)),
        NamedOverride::new("oracle_item", with(&|o| o.item = Oracle)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub p: f64,
}

/// Input strings actually fed to each stage; absent when the stage was
/// skipped or did not run.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageInputs {
    pub goal: Option<String>,
    pub topic: Option<String>,
    pub item: Option<String>,
    pub response: Option<String>,
}

impl StageInputs {
    pub fn get(&self, task: Task) -> Option<&str> {
        match task {
            Task::G => self.goal.as_deref(),
            Task::T => self.topic.as_deref(),
            Task::R => self.item.as_deref(),
            Task::D => self.response.as_deref(),
        }
    }
}

/// Pipeline output for one system turn; one line of a predictions file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub goal: Vec<String>,
    pub topics: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranked_items: Option<Vec<RankedItem>>,
    /// Item passed on to the response stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    pub response: String,
    pub stage_inputs: StageInputs,
}

pub fn write_predictions(preds: &[TurnPrediction], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<TurnPrediction>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

type PredictionIndex = HashMap<(String, usize), TurnPrediction>;

fn index_predictions(preds: Vec<TurnPrediction>) -> PredictionIndex {
    preds
        .into_iter()
        .map(|p| ((p.dialogue_id.clone(), p.turn_index), p))
        .collect()
}

/// One model per stage; a stage may be left empty when it never runs from
/// a model.
#[derive(Clone, Default)]
pub struct StageModels {
    pub goal: Option<Arc<dyn Seq2Seq>>,
    pub topic: Option<Arc<dyn Seq2Seq>>,
    pub item: Option<Arc<dyn Seq2Seq>>,
    pub response: Option<Arc<dyn Seq2Seq>>,
}

impl StageModels {
    /// Task-specific models where present, otherwise the shared θ.
    pub fn from_checkpoints(set: &CheckpointSet) -> Self {
        let get = |t: Task| set.model_for(t).map(|m| Arc::new(m.clone()) as Arc<dyn Seq2Seq>);
        StageModels {
            goal: get(Task::G),
            topic: get(Task::T),
            item: get(Task::R),
            response: get(Task::D),
        }
    }

    fn get(&self, task: Task) -> Result<&dyn Seq2Seq> {
        let m = match task {
            Task::G => &self.goal,
            Task::T => &self.topic,
            Task::R => &self.item,
            Task::D => &self.response,
        };
        m.as_deref().ok_or_else(|| Error::MissingModel(task.to_string()))
    }

    fn check_common_vocabulary(&self) -> Result<()> {
        let digests: Vec<String> = [&self.goal, &self.topic, &self.item, &self.response]
            .into_iter()
            .flatten()
            .map(|m| m.vocab_digest())
            .collect();
        match digests.iter().find(|d| **d != digests[0]) {
            Some(d) => Err(Error::DigestMismatch {
                expected: digests[0].clone(),
                found: d.clone(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub strategy: PromptStrategy,
    pub budget: LengthBudget,
    /// A goal label triggers the item stage when it contains any of these
    /// keywords (case-insensitive).
    pub recommendation_keywords: Vec<String>,
    /// Run the item stage on every turn instead of only after a
    /// recommendation goal.
    pub always_rank_items: bool,
    pub goal_decode: DecodeConfig,
    pub topic_decode: DecodeConfig,
    pub response_decode: DecodeConfig,
    /// Length of the ranked item list kept in each prediction.
    pub max_ranked_items: usize,
    pub tokenization: WordTokenization,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let budget = LengthBudget::default();
        PipelineConfig {
            strategy: PromptStrategy::default(),
            budget,
            recommendation_keywords: vec!["recommendation".into(), "推荐".into()],
            always_rank_items: false,
            goal_decode: DecodeConfig::greedy(budget.max_target),
            topic_decode: DecodeConfig::greedy(budget.max_target),
            response_decode: DecodeConfig::beam(4, budget.max_target),
            max_ranked_items: 50,
            tokenization: WordTokenization::Whitespace,
        }
    }
}

impl PipelineConfig {
    pub fn is_recommendation_goal(&self, label: &str) -> bool {
        let l = label.to_lowercase();
        self.recommendation_keywords.iter().any(|k| l.contains(&k.to_lowercase()))
    }
}

pub struct Pipeline {
    pub models: StageModels,
    pub cfg: PipelineConfig,
    pub catalog: Vec<Item>,
    counter: Arc<dyn TokenCount + Send + Sync>,
    external: HashMap<String, PredictionIndex>,
}

impl Pipeline {
    /// `counter` must be the tokenizer the models were trained with, so
    /// truncation matches the training inputs.
    pub fn new(
        models: StageModels,
        cfg: PipelineConfig,
        catalog: Vec<Item>,
        counter: Arc<dyn TokenCount + Send + Sync>,
    ) -> Result<Self> {
        models.check_common_vocabulary()?;
        cfg.budget.validate()?;
        Ok(Pipeline {
            models,
            cfg,
            catalog,
            counter,
            external: HashMap::new(),
        })
    }

    /// Registers predictions that `StageSource::External(key)` refers to.
    pub fn add_external(&mut self, key: &str, preds: Vec<TurnPrediction>) {
        self.external.insert(key.to_string(), index_predictions(preds));
    }

    /// Loads every external predictions file named in `ov` that is not
    /// registered yet.
    pub fn load_externals(&mut self, ov: &StageOverride) -> Result<()> {
        for s in ov.sources() {
            if let StageSource::External(path) = s {
                if !self.external.contains_key(path) {
                    let preds = read_predictions(Path::new(path))?;
                    self.add_external(path, preds);
                }
            }
        }
        Ok(())
    }

    fn external(&self, key: &str, s: &TurnSample) -> Result<&TurnPrediction> {
        self.external
            .get(key)
            .ok_or_else(|| Error::Config(format!("external predictions `{key}` not loaded")))?
            .get(&(s.dialogue_id.clone(), s.turn_index))
            .ok_or_else(|| {
                Error::Config(format!(
                    "external predictions `{key}` lack dialogue {} turn {}",
                    s.dialogue_id, s.turn_index
                ))
            })
    }

    pub fn input(&self, task: Task, s: &TurnSample, upstream: &StageValues) -> Result<String> {
        build_input(task, s, self.cfg.strategy, &self.cfg.budget, upstream, self.counter.as_ref())
    }

    /// The input each stage would receive under ground-truth conditioning.
    pub fn oracle_input(&self, task: Task, s: &TurnSample) -> Result<String> {
        self.input(task, s, &StageValues::oracle(s))
    }

    fn item_by_id(&self, id: &str) -> Item {
        self.catalog
            .iter()
            .find(|it| it.id == id)
            .cloned()
            .unwrap_or_else(|| Item::new(id, id))
    }

    /// Runs the four stages in order for one system turn.
    pub fn run_turn(&self, s: &TurnSample, ov: &StageOverride) -> Result<TurnPrediction> {
        ov.validate()?;
        let mut inputs = StageInputs::default();
        let mut up = StageValues::default();

        let goal_input = self.input(Task::G, s, &up)?;
        up.goals = match &ov.goal {
            StageSource::Model => {
                let out = self.models.get(Task::G)?.generate(&goal_input, &self.cfg.goal_decode)?;
                parse_goal_output(&out)
            }
            StageSource::Oracle => s.oracle_goals.clone(),
            StageSource::External(k) => self.external(k, s)?.goal.clone(),
            StageSource::Skip => Vec::new(),
        };
        if ov.goal != StageSource::Skip {
            inputs.goal = Some(goal_input);
        }

        let topic_input = self.input(Task::T, s, &up)?;
        up.topics = match &ov.topic {
            StageSource::Model => {
                let out = self.models.get(Task::T)?.generate(&topic_input, &self.cfg.topic_decode)?;
                parse_topic_output(&out)
            }
            StageSource::Oracle => s.oracle_topics.clone(),
            StageSource::External(k) => self.external(k, s)?.topics.clone(),
            StageSource::Skip => Vec::new(),
        };
        if ov.topic != StageSource::Skip {
            inputs.topic = Some(topic_input);
        }

        let triggered = self.cfg.always_rank_items || up.goals.iter().any(|g| self.cfg.is_recommendation_goal(g));
        let mut ranked_items = None;
        if triggered && ov.item != StageSource::Skip {
            let item_input = self.input(Task::R, s, &up)?;
            up.item = match &ov.item {
                StageSource::Model => {
                    let ranked = self.models.get(Task::R)?.rank_items(&item_input, &self.catalog)?;
                    let top = ranked.first().map(|(id, _)| self.item_by_id(id));
                    ranked_items = Some(
                        ranked
                            .into_iter()
                            .take(self.cfg.max_ranked_items)
                            .map(|(id, p)| RankedItem { id, p })
                            .collect(),
                    );
                    top
                }
                StageSource::Oracle => s.oracle_items.first().cloned(),
                StageSource::External(k) => {
                    let ext = self.external(k, s)?;
                    ranked_items = ext.ranked_items.clone();
                    ext.item_id
                        .as_deref()
                        .or_else(|| ext.ranked_items.as_ref().and_then(|r| r.first()).map(|r| r.id.as_str()))
                        .map(|id| self.item_by_id(id))
                }
                StageSource::Skip => unreachable!("checked above"),
            };
            inputs.item = Some(item_input);
        }

        let response_input = self.input(Task::D, s, &up)?;
        let response = match &ov.response {
            StageSource::Model => self.models.get(Task::D)?.generate(&response_input, &self.cfg.response_decode)?,
            StageSource::Oracle => s.reference.split_whitespace().collect::<Vec<_>>().join(" "),
            StageSource::External(k) => self.external(k, s)?.response.clone(),
            StageSource::Skip => unreachable!("validated"),
        };
        inputs.response = Some(response_input);

        Ok(TurnPrediction {
            dialogue_id: s.dialogue_id.clone(),
            turn_index: s.turn_index,
            goal: up.goals,
            topics: up.topics,
            ranked_items,
            item_id: up.item.map(|i| i.id),
            response,
            stage_inputs: inputs,
        })
    }

    /// Runs every system turn of `corpus`.
    pub fn run_corpus(&self, corpus: &Corpus, ov: &StageOverride) -> Result<Vec<TurnPrediction>> {
        derive_turns(corpus).iter().map(|s| self.run_turn(s, ov)).collect()
    }

    /// One metrics row per configuration of `suite`. Perplexity scores the
    /// reference response under the input the response stage received.
    pub fn run_ablation(&mut self, test: &Corpus, suite: &[NamedOverride]) -> Result<Vec<AblationRow>> {
        if suite.is_empty() {
            return Err(Error::Config("ablation suite is empty".into()));
        }
        let samples = derive_turns(test);
        let mut rows = Vec::with_capacity(suite.len());
        for cfg in suite {
            self.load_externals(&cfg.overrides)?;
            let mut hyps = Vec::with_capacity(samples.len());
            let mut refs = Vec::with_capacity(samples.len());
            let mut preds = Vec::with_capacity(samples.len());
            for s in &samples {
                let p = self.run_turn(s, &cfg.overrides)?;
                hyps.push(p.response.clone());
                refs.push(s.reference.clone());
                preds.push(p);
            }
            let ppl = match &self.models.response {
                Some(m) => response_perplexity(m.as_ref(), &preds, &samples)?,
                None => None,
            };
            let generation = generation_score(&hyps, &refs, self.cfg.tokenization, ppl)?;
            let em = self.measure_propagation(&preds, &samples)?;
            rows.push(AblationRow {
                name: cfg.name.clone(),
                turns: samples.len(),
                generation,
                em,
            });
        }
        Ok(rows)
    }

    /// Exact-match rate between the inputs fed to stages T, R and D and the
    /// inputs built from ground-truth upstream labels. Stage R is measured
    /// over turns with an annotated item only.
    pub fn measure_propagation(&self, preds: &[TurnPrediction], samples: &[TurnSample]) -> Result<PropagationEm> {
        let by_key: HashMap<(&str, usize), &TurnSample> =
            samples.iter().map(|s| ((s.dialogue_id.as_str(), s.turn_index), s)).collect();
        let mut hits = [0usize; 3];
        let mut totals = [0usize; 3];
        for p in preds {
            let s = by_key
                .get(&(p.dialogue_id.as_str(), p.turn_index))
                .ok_or_else(|| Error::Config(format!("no gold turn for {} #{}", p.dialogue_id, p.turn_index)))?;
            for (slot, task) in [Task::T, Task::R, Task::D].into_iter().enumerate() {
                if task == Task::R && s.oracle_items.is_empty() {
                    continue;
                }
                totals[slot] += 1;
                if p.stage_inputs.get(task) == Some(self.oracle_input(task, s)?.as_str()) {
                    hits[slot] += 1;
                }
            }
        }
        let rate = |i: usize| (totals[i] > 0).then(|| hits[i] as f64 / totals[i] as f64);
        Ok(PropagationEm {
            topic: rate(0),
            item: rate(1),
            response: rate(2),
            turns: totals,
        })
    }
}

/// Perplexity of the gold responses under the inputs the response stage
/// actually received. `None` when no prediction recorded a response input.
pub fn response_perplexity(model: &dyn Seq2Seq, preds: &[TurnPrediction], samples: &[TurnSample]) -> Result<Option<f64>> {
    let by_key: HashMap<(&str, usize), &TurnSample> =
        samples.iter().map(|s| ((s.dialogue_id.as_str(), s.turn_index), s)).collect();
    let (mut nll, mut tokens) = (0.0, 0usize);
    for p in preds {
        let Some(input) = &p.stage_inputs.response else { continue };
        let s = by_key
            .get(&(p.dialogue_id.as_str(), p.turn_index))
            .ok_or_else(|| Error::Config(format!("no gold turn for {} #{}", p.dialogue_id, p.turn_index)))?;
        let lp = model.score_target(input, &s.reference)?;
        nll -= lp.iter().sum::<f64>();
        tokens += lp.len();
    }
    Ok((tokens > 0).then(|| perplexity_from_nll(nll, tokens)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationEm {
    pub topic: Option<f64>,
    pub item: Option<f64>,
    pub response: Option<f64>,
    /// Turns measured for T, R and D.
    pub turns: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub turns: usize,
    pub generation: GenerationScore,
    pub em: PropagationEm,
}

/// Aligned text table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<14} {:>7} {:>7} {:>7} {:>7} {:>9} {:>7} {:>7} {:>7}\n",
        "config", "F1", "BLEU-1", "BLEU-2", "Dist-2", "PPL", "EM-T", "EM-R", "EM-D"
    );
    let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
    for r in rows {
        let g = &r.generation;
        out.push_str(&format!(
            "{:<14} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>9} {:>7} {:>7} {:>7}\n",
            r.name,
            g.word_f1,
            g.bleu1,
            g.bleu2,
            g.dist2,
            g.ppl.map_or("-".to_string(), |p| format!("{p:.3}")),
            pct(r.em.topic),
            pct(r.em.item),
            pct(r.em.response),
        ));
    }
    out
}

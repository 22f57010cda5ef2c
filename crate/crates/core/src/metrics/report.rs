//! Corpus-level evaluation of a predictions file against gold turns, with
//! JSON and aligned-text renderings.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    generation_score, goal_macro_prf, goal_micro_prf, hit_at_k, ndcg_mrr, topic_micro_prf, GenerationScore, LabelScore,
    RankScore, WordTokenization,
};
use crate::corpus::{derive_turns, Corpus, TurnSample};
use crate::error::{Error, Result};
use crate::pipeline::TurnPrediction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportOptions {
    pub tokenization: WordTokenization,
    /// Cutoffs for NDCG/MRR.
    pub rank_ks: Vec<usize>,
    /// Cutoffs for item Hit@k.
    pub item_hit_ks: Vec<usize>,
    /// Perplexity computed elsewhere (it needs the model).
    pub ppl: Option<f64>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            tokenization: WordTokenization::Whitespace,
            rank_ks: vec![10, 50],
            item_hit_ks: vec![1, 10, 50],
            ppl: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GoalScores {
    pub macro_avg: LabelScore,
    pub micro: LabelScore,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ItemScore {
    pub rank: RankScore,
    pub hit: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GoalTypeRow {
    pub goal_type: String,
    pub turns: usize,
    /// Share of evaluated turns whose gold goals contain this type.
    pub frequency: f64,
    pub goal_f1: f64,
    pub topic_f1: f64,
    pub generation: GenerationScore,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub turns: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub goal: Option<GoalScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topic: Option<LabelScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item: Option<ItemScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationScore>,
    pub by_goal_type: Vec<GoalTypeRow>,
}

fn has_goal(p: &TurnPrediction) -> bool {
    p.stage_inputs.goal.is_some() || !p.goal.is_empty()
}

fn has_topic(p: &TurnPrediction) -> bool {
    p.stage_inputs.topic.is_some() || !p.topics.is_empty()
}

fn has_response(p: &TurnPrediction) -> bool {
    p.stage_inputs.response.is_some() || !p.response.is_empty()
}

/// Pairs each prediction with its gold turn.
fn align<'a>(preds: &'a [TurnPrediction], corpus: &Corpus) -> Result<Vec<(&'a TurnPrediction, TurnSample)>> {
    let mut gold: HashMap<(String, usize), TurnSample> = derive_turns(corpus)
        .into_iter()
        .map(|s| ((s.dialogue_id.clone(), s.turn_index), s))
        .collect();
    preds
        .iter()
        .map(|p| {
            gold.remove(&(p.dialogue_id.clone(), p.turn_index))
                .map(|s| (p, s))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "prediction for {} turn {} has no gold system turn (or is duplicated)",
                        p.dialogue_id, p.turn_index
                    ))
                })
        })
        .collect()
}

/// Scores every task that the predictions cover.
pub fn evaluate(preds: &[TurnPrediction], corpus: &Corpus, opts: &ReportOptions) -> Result<EvalReport> {
    let pairs = align(preds, corpus)?;
    let mut report = EvalReport {
        turns: pairs.len(),
        ..EvalReport::default()
    };

    if pairs.iter().any(|(p, _)| has_goal(p)) {
        let (gp, gg): (Vec<Vec<String>>, Vec<Vec<String>>) = pairs
            .iter()
            .filter(|(_, s)| !s.oracle_goals.is_empty())
            .map(|(p, s)| (p.goal.clone(), s.oracle_goals.clone()))
            .unzip();
        report.goal = Some(GoalScores {
            macro_avg: goal_macro_prf(&gp, &gg, &corpus.goal_set)?,
            micro: goal_micro_prf(&gp, &gg)?,
        });
    }

    if pairs.iter().any(|(p, _)| has_topic(p)) {
        let (tp, tg): (Vec<Vec<String>>, Vec<Vec<String>>) =
            pairs.iter().map(|(p, s)| (p.topics.clone(), s.oracle_topics.clone())).unzip();
        let mut score = topic_micro_prf(&tp, &tg)?;
        if let Some(h) = hit_at_k(&tp, &tg, 1)? {
            score.hit.insert(1, h);
        }
        report.topic = Some(score);
    }

    if pairs.iter().any(|(p, _)| p.ranked_items.is_some()) {
        let with_gold: Vec<&(&TurnPrediction, TurnSample)> =
            pairs.iter().filter(|(_, s)| !s.oracle_items.is_empty()).collect();
        let ranked: Vec<Vec<String>> = with_gold
            .iter()
            .map(|(p, _)| {
                p.ranked_items
                    .as_ref()
                    .map(|r| r.iter().map(|x| x.id.clone()).collect())
                    .unwrap_or_default()
            })
            .collect();
        let gold: Vec<String> = with_gold.iter().map(|(_, s)| s.oracle_items[0].id.clone()).collect();
        let gold_lists: Vec<Vec<String>> = gold.iter().map(|g| vec![g.clone()]).collect();
        let mut hit = BTreeMap::new();
        for &k in &opts.item_hit_ks {
            if let Some(h) = hit_at_k(&ranked, &gold_lists, k)? {
                hit.insert(k, h);
            }
        }
        report.item = Some(ItemScore {
            rank: ndcg_mrr(&ranked, &gold, &opts.rank_ks)?,
            hit,
        });
    }

    if pairs.iter().any(|(p, _)| has_response(p)) {
        let hyps: Vec<String> = pairs.iter().map(|(p, _)| p.response.clone()).collect();
        let refs: Vec<String> = pairs.iter().map(|(_, s)| s.reference.clone()).collect();
        report.generation = Some(generation_score(&hyps, &refs, opts.tokenization, opts.ppl)?);
    }

    report.by_goal_type = stratify_pairs(&pairs, corpus, opts)?;
    Ok(report)
}

/// Per-goal-type table. A turn counts towards every goal type in its gold
/// goal list.
pub fn stratify_by_goal_type(preds: &[TurnPrediction], corpus: &Corpus, opts: &ReportOptions) -> Result<Vec<GoalTypeRow>> {
    stratify_pairs(&align(preds, corpus)?, corpus, opts)
}

fn stratify_pairs(pairs: &[(&TurnPrediction, TurnSample)], corpus: &Corpus, opts: &ReportOptions) -> Result<Vec<GoalTypeRow>> {
    let mut order: Vec<String> = corpus.goal_set.clone();
    let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, (_, s)) in pairs.iter().enumerate() {
        let mut seen = Vec::new();
        for g in &s.oracle_goals {
            if seen.contains(g) {
                continue;
            }
            seen.push(g.clone());
            if !order.contains(g) {
                order.push(g.clone());
            }
            groups.entry(g.clone()).or_default().push(i);
        }
    }
    let n = pairs.len().max(1) as f64;
    let mut rows = Vec::new();
    for g in order {
        let Some(idx) = groups.get(&g) else { continue };
        let sub: Vec<&(&TurnPrediction, TurnSample)> = idx.iter().map(|&i| &pairs[i]).collect();
        let gp: Vec<Vec<String>> = sub.iter().map(|(p, _)| p.goal.clone()).collect();
        let gg: Vec<Vec<String>> = sub.iter().map(|(_, s)| s.oracle_goals.clone()).collect();
        let tp: Vec<Vec<String>> = sub.iter().map(|(p, _)| p.topics.clone()).collect();
        let tg: Vec<Vec<String>> = sub.iter().map(|(_, s)| s.oracle_topics.clone()).collect();
        let hyps: Vec<String> = sub.iter().map(|(p, _)| p.response.clone()).collect();
        let refs: Vec<String> = sub.iter().map(|(_, s)| s.reference.clone()).collect();
        rows.push(GoalTypeRow {
            goal_type: g,
            turns: sub.len(),
            frequency: sub.len() as f64 / n,
            goal_f1: goal_macro_prf(&gp, &gg, &corpus.goal_set)?.f1,
            topic_f1: topic_micro_prf(&tp, &tg)?.f1,
            generation: generation_score(&hyps, &refs, opts.tokenization, None)?,
        });
    }
    Ok(rows)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable aligned tables.
    pub fn to_text(&self) -> String {
        let mut out = format!("turns evaluated: {}\n", self.turns);
        if let Some(g) = &self.goal {
            out.push_str(&format!(
                "goal   macro P/R/F1 {:.4} {:.4} {:.4}   micro F1 {:.4}\n",
                g.macro_avg.p, g.macro_avg.r, g.macro_avg.f1, g.micro.f1
            ));
        }
        if let Some(t) = &self.topic {
            out.push_str(&format!("topic  P/R/F1 {:.4} {:.4} {:.4}", t.p, t.r, t.f1));
            for (k, v) in &t.hit {
                out.push_str(&format!("   Hit@{k} {v:.4}"));
            }
            out.push('\n');
        }
        if let Some(i) = &self.item {
            out.push_str("item  ");
            for (k, v) in &i.hit {
                out.push_str(&format!(" Hit@{k} {v:.4}"));
            }
            for (k, v) in &i.rank.ndcg {
                out.push_str(&format!(" NDCG@{k} {v:.4}"));
            }
            for (k, v) in &i.rank.mrr {
                out.push_str(&format!(" MRR@{k} {v:.4}"));
            }
            out.push('\n');
        }
        if let Some(g) = &self.generation {
            out.push_str(&format!(
                "response F1 {:.4}  BLEU-1/2 {:.4}/{:.4}  Dist-2 {:.4}  PPL {}\n",
                g.word_f1,
                g.bleu1,
                g.bleu2,
                g.dist2,
                g.ppl.map_or("-".into(), |p| format!("{p:.3}"))
            ));
        }
        if !self.by_goal_type.is_empty() {
            let w = self.by_goal_type.iter().map(|r| r.goal_type.chars().count()).max().unwrap_or(9).max(9);
            out.push_str(&format!(
                "\n{:<w$} {:>6} {:>7} {:>7} {:>8} {:>7} {:>7} {:>7}\n",
                "goal type", "freq", "goalF1", "topicF1", "respF1", "BLEU-1", "BLEU-2", "Dist-2"
            ));
            for r in &self.by_goal_type {
                out.push_str(&format!(
                    "{:<w$} {:>5.1}% {:>7.4} {:>7.4} {:>8.4} {:>7.4} {:>7.4} {:>7.4}\n",
                    r.goal_type,
                    100.0 * r.frequency,
                    r.goal_f1,
                    r.topic_f1,
                    r.generation.word_f1,
                    r.generation.bleu1,
                    r.generation.bleu2,
                    r.generation.dist2
                ));
            }
        }
        out
    }
}

//! Evaluation metrics for the four tasks: generation quality (word F1,
//! BLEU, distinct-n, perplexity), label-set scores for goals and topics,
//! Hit@k, and NDCG/MRR for item rankings.

mod report;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::serialize::SerializedPair;
use crate::train::summed_nll;

pub use report::{evaluate, stratify_by_goal_type, EvalReport, GoalTypeRow, ItemScore, ReportOptions};

/// How responses are split into words for F1 and BLEU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordTokenization {
    /// Whitespace-separated words.
    #[default]
    Whitespace,
    /// Every non-space character is a word (for Chinese text).
    Character,
}

impl WordTokenization {
    pub fn words(self, text: &str) -> Vec<String> {
        match self {
            WordTokenization::Whitespace => text.split_whitespace().map(str::to_string).collect(),
            WordTokenization::Character => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

impl Prf {
    fn from_pr(p: f64, r: f64) -> Self {
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Prf { p, r, f1 }
    }

    fn mean(xs: &[Prf]) -> Prf {
        if xs.is_empty() {
            return Prf::default();
        }
        let n = xs.len() as f64;
        Prf {
            p: xs.iter().map(|x| x.p).sum::<f64>() / n,
            r: xs.iter().map(|x| x.r).sum::<f64>() / n,
            f1: xs.iter().map(|x| x.f1).sum::<f64>() / n,
        }
    }
}

fn counts<T: Eq + Hash + Clone>(xs: &[T]) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for x in xs {
        *m.entry(x.clone()).or_insert(0) += 1;
    }
    m
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::LengthMismatch(a, b))
    }
}

/// Multiset word overlap between a hypothesis and a reference.
pub fn word_f1(hyp: &str, reference: &str, tok: WordTokenization) -> Prf {
    let h = tok.words(hyp);
    let r = tok.words(reference);
    match (h.is_empty(), r.is_empty()) {
        (true, true) => return Prf { p: 1.0, r: 1.0, f1: 1.0 },
        (true, false) | (false, true) => return Prf::default(),
        _ => {}
    }
    let rc = counts(&r);
    let overlap: usize = counts(&h).iter().map(|(w, &n)| n.min(rc.get(w).copied().unwrap_or(0))).sum();
    Prf::from_pr(overlap as f64 / h.len() as f64, overlap as f64 / r.len() as f64)
}

/// Mean word F1 over aligned hypothesis/reference pairs.
pub fn corpus_word_f1(hyps: &[String], refs: &[String], tok: WordTokenization) -> Result<f64> {
    check_aligned(hyps.len(), refs.len())?;
    if hyps.is_empty() {
        return Ok(0.0);
    }
    Ok(hyps.iter().zip(refs).map(|(h, r)| word_f1(h, r, tok).f1).sum::<f64>() / hyps.len() as f64)
}

fn ngrams(words: &[String], n: usize) -> Vec<&[String]> {
    if n == 0 || words.len() < n {
        return Vec::new();
    }
    words.windows(n).collect()
}

/// Sentence-level BLEU at one n-gram order: brevity penalty times the
/// clipped n-gram precision. A sentence without matching n-grams scores 0.
pub fn sentence_bleu(hyp: &str, reference: &str, n: usize, tok: WordTokenization) -> f64 {
    let h = tok.words(hyp);
    let r = tok.words(reference);
    let hg = ngrams(&h, n);
    if hg.is_empty() {
        return 0.0;
    }
    let rc = counts(&ngrams(&r, n));
    let clipped: usize = counts(&hg).iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
    let precision = clipped as f64 / hg.len() as f64;
    let (c, rl) = (h.len() as f64, r.len() as f64);
    let bp = if c > rl { 1.0 } else { (1.0 - rl / c).exp() };
    bp * precision
}

/// Sentence BLEU-n averaged over the corpus.
pub fn bleu_n(hyps: &[String], refs: &[String], n: usize, tok: WordTokenization) -> Result<f64> {
    check_aligned(hyps.len(), refs.len())?;
    if hyps.is_empty() {
        return Ok(0.0);
    }
    Ok(hyps.iter().zip(refs).map(|(h, r)| sentence_bleu(h, r, n, tok)).sum::<f64>() / hyps.len() as f64)
}

/// Unique n-grams over total n-grams across all hypotheses.
pub fn distinct_n(hyps: &[String], n: usize, tok: WordTokenization) -> f64 {
    let words: Vec<Vec<String>> = hyps.iter().map(|h| tok.words(h)).collect();
    let mut total = 0usize;
    let mut unique: HashSet<&[String]> = HashSet::new();
    for w in &words {
        for g in ngrams(w, n) {
            total += 1;
            unique.insert(g);
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Perplexity from a summed token NLL.
pub fn perplexity_from_nll(nll_sum: f64, tokens: usize) -> f64 {
    if tokens == 0 {
        return f64::NAN;
    }
    (nll_sum / tokens as f64).exp()
}

/// Perplexity of `model` on reference targets, end tokens counted.
pub fn perplexity(model: &Backbone, pairs: &[SerializedPair]) -> Result<f64> {
    let (sum, n) = summed_nll(model, pairs, 32)?;
    Ok(perplexity_from_nll(sum, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerationScore {
    pub word_f1: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub dist2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
}

pub fn generation_score(hyps: &[String], refs: &[String], tok: WordTokenization, ppl: Option<f64>) -> Result<GenerationScore> {
    Ok(GenerationScore {
        word_f1: corpus_word_f1(hyps, refs, tok)?,
        bleu1: bleu_n(hyps, refs, 1, tok)?,
        bleu2: bleu_n(hyps, refs, 2, tok)?,
        dist2: distinct_n(hyps, 2, tok),
        ppl,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelScore {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    /// Number of classes (macro) or instances (micro) averaged.
    pub support: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hit: BTreeMap<usize, f64>,
}

impl LabelScore {
    fn from_prf(x: Prf, support: usize) -> Self {
        LabelScore {
            p: x.p,
            r: x.r,
            f1: x.f1,
            support,
            hit: BTreeMap::new(),
        }
    }
}

fn dedup(xs: &[String]) -> Vec<&String> {
    let mut seen = HashSet::new();
    xs.iter().filter(|x| seen.insert(x.as_str())).collect()
}

/// Per-class precision/recall/F1 over the goal inventory, macro-averaged.
/// Predicted labels outside `goal_set` count for no class. Classes absent
/// from both golds and predictions are left out of the average.
pub fn goal_macro_prf(preds: &[Vec<String>], golds: &[Vec<String>], goal_set: &[String]) -> Result<LabelScore> {
    check_aligned(preds.len(), golds.len())?;
    let inventory: HashSet<&str> = goal_set.iter().map(String::as_str).collect();
    let mut tp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fnc: BTreeMap<&str, usize> = BTreeMap::new();
    let mut classes: Vec<&str> = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for (p, g) in preds.iter().zip(golds) {
        let ps: HashSet<&str> = p.iter().map(String::as_str).filter(|x| inventory.contains(x)).collect();
        let gs: HashSet<&str> = g.iter().map(String::as_str).collect();
        for &c in ps.iter().chain(gs.iter()) {
            if seen.insert(c) {
                classes.push(c);
            }
        }
        for &c in &ps {
            if gs.contains(c) {
                *tp.entry(c).or_insert(0) += 1;
            } else {
                *fp.entry(c).or_insert(0) += 1;
            }
        }
        for &c in &gs {
            if !ps.contains(c) {
                *fnc.entry(c).or_insert(0) += 1;
            }
        }
    }
    let per_class: Vec<Prf> = classes
        .iter()
        .map(|c| {
            let t = tp.get(c).copied().unwrap_or(0) as f64;
            let f = fp.get(c).copied().unwrap_or(0) as f64;
            let n = fnc.get(c).copied().unwrap_or(0) as f64;
            let p = if t + f > 0.0 { t / (t + f) } else { 0.0 };
            let r = if t + n > 0.0 { t / (t + n) } else { 0.0 };
            Prf::from_pr(p, r)
        })
        .collect();
    Ok(LabelScore::from_prf(Prf::mean(&per_class), per_class.len()))
}

/// Pooled precision/recall/F1 over all goal decisions. Every predicted label
/// not in the gold list, in inventory or not, is a false positive.
pub fn goal_micro_prf(preds: &[Vec<String>], golds: &[Vec<String>]) -> Result<LabelScore> {
    check_aligned(preds.len(), golds.len())?;
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        let ps = dedup(p);
        let gs = dedup(g);
        tp += ps.iter().filter(|x| gs.contains(x)).count();
        np += ps.len();
        ng += gs.len();
    }
    let p = if np > 0 { tp as f64 / np as f64 } else { 0.0 };
    let r = if ng > 0 { tp as f64 / ng as f64 } else { 0.0 };
    Ok(LabelScore::from_prf(Prf::from_pr(p, r), preds.len()))
}

/// Set precision/recall/F1 of one topic prediction. An empty gold set
/// scores 1 when the prediction is also empty and 0 otherwise.
pub fn topic_instance_prf(pred: &[String], gold: &[String]) -> Prf {
    let ps = dedup(pred);
    let gs = dedup(gold);
    if gs.is_empty() {
        return if ps.is_empty() { Prf { p: 1.0, r: 1.0, f1: 1.0 } } else { Prf::default() };
    }
    if ps.is_empty() {
        return Prf::default();
    }
    let inter = ps.iter().filter(|x| gs.contains(x)).count() as f64;
    Prf::from_pr(inter / ps.len() as f64, inter / gs.len() as f64)
}

/// Instance-averaged topic precision/recall/F1.
pub fn topic_micro_prf(preds: &[Vec<String>], golds: &[Vec<String>]) -> Result<LabelScore> {
    check_aligned(preds.len(), golds.len())?;
    let xs: Vec<Prf> = preds.iter().zip(golds).map(|(p, g)| topic_instance_prf(p, g)).collect();
    Ok(LabelScore::from_prf(Prf::mean(&xs), xs.len()))
}

/// Fraction of turns whose top-`k` predictions intersect the gold labels.
/// Generated label lists count their first label as rank 1. Turns without
/// gold labels are skipped; `None` when no turn remains.
pub fn hit_at_k(ranked: &[Vec<String>], golds: &[Vec<String>], k: usize) -> Result<Option<f64>> {
    check_aligned(ranked.len(), golds.len())?;
    let (mut hits, mut n) = (0usize, 0usize);
    for (r, g) in ranked.iter().zip(golds) {
        if g.is_empty() {
            continue;
        }
        n += 1;
        if r.iter().take(k).any(|x| g.contains(x)) {
            hits += 1;
        }
    }
    Ok((n > 0).then(|| hits as f64 / n as f64))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankScore {
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: BTreeMap<usize, f64>,
    pub support: usize,
}

/// 1-based rank of `gold` in `ranked`.
fn rank_of(ranked: &[String], gold: &str) -> Option<usize> {
    ranked.iter().position(|x| x == gold).map(|i| i + 1)
}

pub fn ndcg_at_k(ranked: &[String], gold: &str, k: usize) -> f64 {
    match rank_of(ranked, gold) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

pub fn mrr_at_k(ranked: &[String], gold: &str, k: usize) -> f64 {
    match rank_of(ranked, gold) {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    }
}

/// NDCG@k and MRR@k with a single relevant item per turn, averaged.
pub fn ndcg_mrr(ranked: &[Vec<String>], golds: &[String], ks: &[usize]) -> Result<RankScore> {
    check_aligned(ranked.len(), golds.len())?;
    let n = ranked.len().max(1) as f64;
    let mut s = RankScore {
        support: ranked.len(),
        ..RankScore::default()
    };
    for &k in ks {
        let nd: f64 = ranked.iter().zip(golds).map(|(r, g)| ndcg_at_k(r, g, k)).sum();
        let mr: f64 = ranked.iter().zip(golds).map(|(r, g)| mrr_at_k(r, g, k)).sum();
        s.ndcg.insert(k, nd / n);
        s.mrr.insert(k, mr / n);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Mean of `b` minus mean of `a`.
    pub delta: f64,
    /// Fraction of resamples in which `b` does not beat `a`.
    pub p_value: f64,
    pub resamples: usize,
}

/// Paired bootstrap over per-sample scores of two systems.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<BootstrapResult> {
    check_aligned(a.len(), b.len())?;
    if a.is_empty() || resamples == 0 {
        return Err(Error::EmptyDataset("bootstrap needs samples and resamples".into()));
    }
    let n = a.len();
    let delta = (b.iter().sum::<f64>() - a.iter().sum::<f64>()) / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0;
    for _ in 0..resamples {
        let mut d = 0.0;
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            d += b[i] - a[i];
        }
        if d <= 0.0 {
            not_better += 1;
        }
    }
    Ok(BootstrapResult {
        delta,
        p_value: not_better as f64 / resamples as f64,
        resamples,
    })
}

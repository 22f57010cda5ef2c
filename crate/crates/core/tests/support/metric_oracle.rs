//! Brute-force reference implementations of the metrics and randomized
//! comparisons against them, shared by the metric tests and the acceptance
//! runner.
#![allow(dead_code)]

use mgcrs_core::metrics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

macro_rules! ensure {
    ($cond:expr) => {
        if !$cond {
            return Err(format!("check failed: {}", stringify!($cond)));
        }
    };
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub const CASES: usize = 1000;
pub const TOL: f64 = 1e-9;
pub const WS: WordTokenization = WordTokenization::Whitespace;

pub fn s(x: &str) -> String {
    x.to_string()
}

pub fn labels(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|x| x.to_string()).collect()
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

pub fn random_sentence(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| ["a", "b", "c", "d"][rng.gen_range(0..4)]).collect::<Vec<_>>().join(" ")
}

pub fn random_labels(rng: &mut ChaCha8Rng, pool: &[&str], max_len: usize) -> Vec<String> {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())].to_string()).collect()
}

fn words(x: &str) -> Vec<String> {
    x.split_whitespace().map(str::to_string).collect()
}


fn ref_word_f1(h: &str, r: &str) -> f64 {
    let h = words(h);
    let mut pool = words(r);
    if h.is_empty() && pool.is_empty() {
        return 1.0;
    }
    if h.is_empty() || pool.is_empty() {
        return 0.0;
    }
    let rl = pool.len();
    let mut overlap = 0;
    for w in &h {
        if let Some(i) = pool.iter().position(|x| x == w) {
            pool.remove(i);
            overlap += 1;
        }
    }
    let p = overlap as f64 / h.len() as f64;
    let r = overlap as f64 / rl as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn grams(w: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= w.len() {
        out.push(w[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn ref_bleu(h: &str, r: &str, n: usize) -> f64 {
    let hw = words(h);
    let rw = words(r);
    let hg = grams(&hw, n);
    if hg.is_empty() {
        return 0.0;
    }
    let mut pool = grams(&rw, n);
    let mut matched = 0;
    for g in &hg {
        if let Some(i) = pool.iter().position(|x| x == g) {
            pool.remove(i);
            matched += 1;
        }
    }
    let bp = if hw.len() > rw.len() { 1.0 } else { (1.0 - rw.len() as f64 / hw.len() as f64).exp() };
    bp * matched as f64 / hg.len() as f64
}

fn ref_distinct(hs: &[String], n: usize) -> f64 {
    let mut all: Vec<Vec<String>> = Vec::new();
    for h in hs {
        all.extend(grams(&words(h), n));
    }
    if all.is_empty() {
        return 0.0;
    }
    let mut uniq: Vec<&Vec<String>> = Vec::new();
    for g in &all {
        if !uniq.contains(&g) {
            uniq.push(g);
        }
    }
    uniq.len() as f64 / all.len() as f64
}

fn uniq(xs: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for x in xs {
        if !out.contains(x) {
            out.push(x.clone());
        }
    }
    out
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Returns (P, R, F1) macro averages.
fn ref_goal_macro(preds: &[Vec<String>], golds: &[Vec<String>], inv: &[String]) -> (f64, f64, f64) {
    let mut classes: Vec<String> = Vec::new();
    for (p, g) in preds.iter().zip(golds) {
        for c in p.iter().filter(|c| inv.contains(c)).chain(g) {
            if !classes.contains(c) {
                classes.push(c.clone());
            }
        }
    }
    if classes.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in &classes {
        let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
        for (p, g) in preds.iter().zip(golds) {
            let in_p = p.contains(c);
            let in_g = g.contains(c);
            match (in_p, in_g) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fnn += 1.0,
                _ => {}
            }
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        sp += p;
        sr += r;
        sf += f1(p, r);
    }
    let n = classes.len() as f64;
    (sp / n, sr / n, sf / n)
}

fn ref_goal_micro(preds: &[Vec<String>], golds: &[Vec<String>]) -> f64 {
    let (mut tp, mut np, mut ng) = (0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        let p = uniq(p);
        let g = uniq(g);
        np += p.len() as f64;
        ng += g.len() as f64;
        tp += p.iter().filter(|x| g.contains(x)).count() as f64;
    }
    let p = if np > 0.0 { tp / np } else { 0.0 };
    let r = if ng > 0.0 { tp / ng } else { 0.0 };
    f1(p, r)
}

fn ref_topic(preds: &[Vec<String>], golds: &[Vec<String>]) -> (f64, f64, f64) {
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        let p = uniq(p);
        let g = uniq(g);
        let (pi, ri) = if g.is_empty() {
            if p.is_empty() {
                (1.0, 1.0)
            } else {
                (0.0, 0.0)
            }
        } else if p.is_empty() {
            (0.0, 0.0)
        } else {
            let inter = p.iter().filter(|x| g.contains(x)).count() as f64;
            (inter / p.len() as f64, inter / g.len() as f64)
        };
        let fi = if g.is_empty() && p.is_empty() { 1.0 } else { f1(pi, ri) };
        sp += pi;
        sr += ri;
        sf += fi;
    }
    let n = preds.len().max(1) as f64;
    (sp / n, sr / n, sf / n)
}

fn ref_hit(ranked: &[Vec<String>], golds: &[Vec<String>], k: usize) -> Option<f64> {
    let mut n = 0.0;
    let mut h = 0.0;
    for (r, g) in ranked.iter().zip(golds) {
        if g.is_empty() {
            continue;
        }
        n += 1.0;
        let mut hit = false;
        for (i, x) in r.iter().enumerate() {
            if i < k && g.contains(x) {
                hit = true;
            }
        }
        if hit {
            h += 1.0;
        }
    }
    if n == 0.0 {
        None
    } else {
        Some(h / n)
    }
}

fn ref_ndcg_mrr(ranked: &[Vec<String>], golds: &[String], k: usize) -> (f64, f64) {
    let (mut nd, mut mr) = (0.0, 0.0);
    for (r, g) in ranked.iter().zip(golds) {
        for (i, x) in r.iter().enumerate() {
            if x == g {
                let rank = (i + 1) as f64;
                if i < k {
                    nd += 1.0 / (rank + 1.0).log2();
                    mr += 1.0 / rank;
                }
                break;
            }
        }
    }
    let n = ranked.len().max(1) as f64;
    (nd / n, mr / n)
}



/// Randomized comparison against the brute-force reference.
pub fn word_f1_matches_reference(cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..cases {
        let (h, r) = (random_sentence(&mut rng, 6), random_sentence(&mut rng, 6));
        ensure!(close(word_f1(&h, &r, WS).f1, ref_word_f1(&h, &r)), "{h:?} {r:?}");
    }
    Ok(())
}

/// Randomized comparison against the brute-force reference.
pub fn bleu_matches_reference(cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..cases {
        let k = rng.gen_range(1..5);
        let hyps: Vec<String> = (0..k).map(|_| random_sentence(&mut rng, 6)).collect();
        let refs: Vec<String> = (0..k).map(|_| random_sentence(&mut rng, 6)).collect();
        for n in [1, 2] {
            let want = hyps.iter().zip(&refs).map(|(h, r)| ref_bleu(h, r, n)).sum::<f64>() / k as f64;
            let got = bleu_n(&hyps, &refs, n, WS).map_err(|e| e.to_string())?;
            ensure!(close(got, want), "{hyps:?} {refs:?} n={n}: {got} vs {want}");
            ensure!((0.0..=1.0).contains(&got));
        }
    }
    Ok(())
}

/// Randomized comparison against the brute-force reference.
pub fn distinct_matches_reference(cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..cases {
        let k = rng.gen_range(0..5);
        let hyps: Vec<String> = (0..k).map(|_| random_sentence(&mut rng, 6)).collect();
        for n in [1, 2] {
            ensure!(close(distinct_n(&hyps, n, WS), ref_distinct(&hyps, n)));
        }
    }
    Ok(())
}

/// Randomized comparison against the brute-force reference.
pub fn goal_scores_match_reference(cases: usize) -> Result<(), String> {
    let pool = ["A", "B", "C", "X"];
    let inv = labels(&["A", "B", "C"]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..cases {
        let k = rng.gen_range(1..8);
        let preds: Vec<Vec<String>> = (0..k).map(|_| random_labels(&mut rng, &pool, 2)).collect();
        let golds: Vec<Vec<String>> = (0..k).map(|_| random_labels(&mut rng, &pool[..3], 2)).collect();
        let got = goal_macro_prf(&preds, &golds, &inv).map_err(|e| e.to_string())?;
        let (p, r, f) = ref_goal_macro(&preds, &golds, &inv);
        ensure!(close(got.p, p) && close(got.r, r) && close(got.f1, f), "{preds:?} {golds:?}");
        ensure!(close(goal_micro_prf(&preds, &golds).map_err(|e| e.to_string())?.f1, ref_goal_micro(&preds, &golds)));
    }
    Ok(())
}

/// Randomized comparison against the brute-force reference.
pub fn topic_scores_match_reference(cases: usize) -> Result<(), String> {
    let pool = ["A", "B", "C", "D"];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..cases {
        let k = rng.gen_range(1..8);
        let preds: Vec<Vec<String>> = (0..k).map(|_| random_labels(&mut rng, &pool, 3)).collect();
        let golds: Vec<Vec<String>> = (0..k).map(|_| random_labels(&mut rng, &pool, 2)).collect();
        let got = topic_micro_prf(&preds, &golds).map_err(|e| e.to_string())?;
        let (p, r, f) = ref_topic(&preds, &golds);
        ensure!(close(got.p, p) && close(got.r, r) && close(got.f1, f), "{preds:?} {golds:?}");
    }
    Ok(())
}

/// Randomized comparison against the brute-force reference.
pub fn hit_and_ranking_match_reference(cases: usize) -> Result<(), String> {
    let pool = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..cases {
        let k = rng.gen_range(1..6);
        let mut ranked = Vec::new();
        for _ in 0..k {
            let mut r: Vec<String> = pool.iter().map(|x| x.to_string()).collect();
            r.truncate(rng.gen_range(0..=pool.len()));
            for i in (1..r.len()).rev() {
                r.swap(i, rng.gen_range(0..=i));
            }
            ranked.push(r);
        }
        let golds: Vec<Vec<String>> = (0..k).map(|_| random_labels(&mut rng, &pool, 2)).collect();
        let single: Vec<String> = (0..k).map(|_| pool[rng.gen_range(0..pool.len())].to_string()).collect();
        let mut last_hit = 0.0;
        let mut last_ndcg = 0.0;
        for cutoff in [1, 2, 3, 5, 8] {
            let h = hit_at_k(&ranked, &golds, cutoff).map_err(|e| e.to_string())?;
            ensure!(h.is_some() == ref_hit(&ranked, &golds, cutoff).is_some(), "hit@{cutoff} definedness {ranked:?} {golds:?}");
            if let (Some(a), Some(b)) = (h, ref_hit(&ranked, &golds, cutoff)) {
                ensure!(close(a, b));
                ensure!(a >= last_hit);
                last_hit = a;
            }
            let sc = ndcg_mrr(&ranked, &single, &[cutoff]).map_err(|e| e.to_string())?;
            let (nd, mr) = ref_ndcg_mrr(&ranked, &single, cutoff);
            ensure!(close(sc.ndcg[&cutoff], nd) && close(sc.mrr[&cutoff], mr));
            ensure!((0.0..=1.0).contains(&nd) && (0.0..=1.0).contains(&mr));
            ensure!(sc.ndcg[&cutoff] >= last_ndcg);
            last_ndcg = sc.ndcg[&cutoff];
        }
    }
    Ok(())
}

/// An empty gold topic list is matched only by an empty prediction.
pub fn empty_topic_convention() -> Result<(), String> {
    let one = |p: &[&str], g: &[&str]| topic_micro_prf(&[labels(p)], &[labels(g)]).map_err(|e| e.to_string());
    let both_empty = one(&[], &[])?;
    ensure!((both_empty.p, both_empty.r, both_empty.f1) == (1.0, 1.0, 1.0));
    let spurious = one(&["A"], &[])?;
    ensure!((spurious.p, spurious.r, spurious.f1) == (0.0, 0.0, 0.0));
    let missed = one(&[], &["A"])?;
    ensure!((missed.p, missed.r, missed.f1) == (0.0, 0.0, 0.0));
    let mixed = topic_micro_prf(&[vec![], labels(&["A"])], &[vec![], labels(&["A"])]).map_err(|e| e.to_string())?;
    ensure!(close(mixed.f1, 1.0));
    Ok(())
}

/// The empty-topic cases plus every randomized comparison, `cases` random
/// inputs each.
pub fn all_match_reference(cases: usize) -> Result<(), String> {
    empty_topic_convention()?;
    word_f1_matches_reference(cases)?;
    bleu_matches_reference(cases)?;
    distinct_matches_reference(cases)?;
    goal_scores_match_reference(cases)?;
    topic_scores_match_reference(cases)?;
    hit_and_ranking_match_reference(cases)
}

//! Greedy and beam decoding, teacher-forced scoring and one-step item
//! ranking over the expanded item vocabulary.

use std::cmp::Ordering;

use super::real::Real;
use super::{Backbone, DecodeConfig, DecodeMode, Seq2Seq};
use crate::corpus::Item;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Log-softmax of one logit row, in double precision.
fn log_softmax<F: Real>(row: &[F]) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap()).collect();
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    xs.into_iter().map(|x| x - lse).collect()
}

/// Highest-scoring token; ties go to the lowest id.
fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in lp.iter().enumerate() {
        if x > lp[best] {
            best = i;
        }
    }
    best
}

/// The `k` best tokens, best first, lowest id first among ties.
fn top_k(lp: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..lp.len()).collect();
    let k = k.min(idx.len());
    let cmp = |a: &usize, b: &usize| lp[*b].partial_cmp(&lp[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

#[derive(Clone)]
struct Hyp {
    ids: Vec<TokenId>,
    score: f64,
}

impl<F: Real> Backbone<F> {
    /// Source ids clipped to the positional capacity, oldest tokens dropped.
    pub fn encode_source(&self, input: &str) -> Vec<TokenId> {
        let mut ids = self.vocab.encode(input);
        let max = self.config.max_positions;
        if ids.len() > max {
            ids.drain(..ids.len() - max);
        }
        ids
    }

    /// Decodes token ids and the cumulative log-probability of the returned
    /// hypothesis (end token included when produced).
    pub fn generate_ids(&self, input: &str, dc: &DecodeConfig) -> Result<(Vec<TokenId>, f64)> {
        dc.validate()?;
        let src = vec![self.encode_source(input)];
        let enc = self.model.encode(&src, None);
        let kv = self.model.cross_kv(&enc);
        let max_len = dc.max_len.min(self.config.max_positions - 1);
        let eos = self.vocab.eos() as usize;
        let sos = self.vocab.sos();
        let step_logprobs = |hyps: &[&Hyp]| -> Vec<Vec<f64>> {
            let tgt: Vec<Vec<TokenId>> = hyps
                .iter()
                .map(|h| std::iter::once(sos).chain(h.ids.iter().copied()).collect())
                .collect();
            let mut rows = Vec::with_capacity(tgt.len());
            let mut off = 0;
            for t in &tgt {
                off += t.len();
                rows.push(off - 1);
            }
            let enc_of = vec![0; tgt.len()];
            let logits = self.model.decoder_logits(&tgt, &enc, &enc_of, &kv, Some(&rows));
            logits.chunks_exact(self.vocab.len()).map(log_softmax).collect()
        };

        let width = match dc.mode {
            DecodeMode::Greedy => {
                let mut h = Hyp { ids: Vec::new(), score: 0.0 };
                while h.ids.len() < max_len {
                    let lp = step_logprobs(&[&h]).pop().unwrap();
                    let tok = argmax(&lp);
                    h.score += lp[tok];
                    if tok == eos {
                        break;
                    }
                    h.ids.push(tok as TokenId);
                }
                return Ok((h.ids, h.score));
            }
            DecodeMode::Beam(w) => w,
        };

        let mut alive = vec![Hyp { ids: Vec::new(), score: 0.0 }];
        let mut finished: Vec<Hyp> = Vec::new();
        for _ in 0..max_len {
            if alive.is_empty() {
                break;
            }
            let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if finished.iter().any(|f| f.score >= best_alive) {
                break;
            }
            let refs: Vec<&Hyp> = alive.iter().collect();
            let lps = step_logprobs(&refs);
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (bi, lp) in lps.iter().enumerate() {
                for tok in top_k(lp, width) {
                    cands.push((alive[bi].score + lp[tok], bi, tok));
                }
            }
            cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(width);
            for &(score, bi, tok) in cands.iter().take(width) {
                let mut ids = alive[bi].ids.clone();
                if tok == eos {
                    finished.push(Hyp { ids, score });
                } else {
                    ids.push(tok as TokenId);
                    next.push(Hyp { ids, score });
                }
            }
            alive = next;
        }
        let best = finished
            .into_iter()
            .chain(alive)
            .reduce(|a, b| if b.score > a.score { b } else { a })
            .expect("at least one hypothesis");
        Ok((best.ids, best.score))
    }

    pub fn generate_text(&self, input: &str, dc: &DecodeConfig) -> Result<String> {
        let (ids, _) = self.generate_ids(input, dc)?;
        Ok(self.vocab.decode(&ids))
    }

    /// Per-token log-probabilities of `target` then the end token under
    /// teacher forcing.
    pub fn score_ids(&self, src: &[TokenId], target: &[TokenId]) -> Result<Vec<f64>> {
        let max = self.config.max_positions;
        for len in [src.len(), target.len() + 1] {
            if len > max {
                return Err(Error::TooLong { len, max });
            }
        }
        let src = vec![src.to_vec()];
        let enc = self.model.encode(&src, None);
        let kv = self.model.cross_kv(&enc);
        let tgt_in: Vec<TokenId> = std::iter::once(self.vocab.sos()).chain(target.iter().copied()).collect();
        let logits = self.model.decoder_logits(&[tgt_in], &enc, &[0], &kv, None);
        let gold = target.iter().copied().chain(std::iter::once(self.vocab.eos()));
        Ok(logits
            .chunks_exact(self.vocab.len())
            .zip(gold)
            .map(|(row, g)| log_softmax(row)[g as usize])
            .collect())
    }

    pub fn rank_item_ids(&self, input: &str, catalog: &[Item]) -> Result<Vec<(String, f64)>> {
        let token_ids = catalog
            .iter()
            .map(|it| {
                self.vocab
                    .item_token_id(&it.id)
                    .ok_or_else(|| Error::Vocabulary(format!("item `{}` has no token", it.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let src = vec![self.encode_source(input)];
        let enc = self.model.encode(&src, None);
        let kv = self.model.cross_kv(&enc);
        let logits = self.model.decoder_logits(&[vec![self.vocab.sos()]], &enc, &[0], &kv, None);
        let xs: Vec<f64> = token_ids.iter().map(|&t| logits[t as usize].to_f64().unwrap()).collect();
        let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut ranked: Vec<(String, f64)> = catalog.iter().zip(exps).map(|(it, e)| (it.id.clone(), e / z)).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
        Ok(ranked)
    }
}

impl<F: Real> Seq2Seq for Backbone<F> {
    fn generate(&self, input: &str, dc: &DecodeConfig) -> Result<String> {
        self.generate_text(input, dc)
    }

    fn score_target(&self, input: &str, target: &str) -> Result<Vec<f64>> {
        self.score_ids(&self.encode_source(input), &self.vocab.encode(target))
    }

    fn rank_items(&self, input: &str, catalog: &[Item]) -> Result<Vec<(String, f64)>> {
        self.rank_item_ids(input, catalog)
    }

    fn vocab_digest(&self) -> String {
        self.vocab.digest()
    }
}

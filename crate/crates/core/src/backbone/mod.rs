//! Sequence-to-sequence backbone shared by all four tasks: a from-scratch
//! encoder-decoder transformer, its optimizer, decoding and checkpoints.

mod checkpoint;
mod decode;
pub mod model;
mod optim;
pub mod params;
pub mod real;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::Item;
use crate::error::{Error, Result};
use crate::serialize::{LengthBudget, SerializedPair};
use crate::vocab::{TokenId, Vocabulary};

pub use model::{Dropout, Segments, TokenBatch, Transformer};
pub use optim::{AdamW, OptimConfig, TrainState};
pub use params::{Dims, Layout, ParamSpec};
pub use real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff: 512,
            dropout: 0.1,
            max_positions: 512,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Smallest configuration used for the synthetic end-to-end run.
    pub fn tiny() -> Self {
        BackboneConfig {
            d_model: 64,
            ff: 256,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, budget: &LengthBudget) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {} must be a positive multiple of the head count {}",
                self.d_model, self.heads
            )));
        }
        if self.ff == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_positions < budget.max_source || self.max_positions < budget.max_target + 1 {
            return Err(Error::Config(format!(
                "max positions {} below the length budget ({} source, {} target)",
                self.max_positions, budget.max_source, budget.max_target
            )));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> Dims {
        Dims {
            vocab,
            d: self.d_model,
            heads: self.heads,
            ff: self.ff,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            max_pos: self.max_positions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Maximum number of generated tokens, end token excluded.
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            max_len,
        }
    }

    pub fn beam(width: usize, max_len: usize) -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam(width),
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("decode max length must be at least 1".into()));
        }
        if self.mode == DecodeMode::Beam(0) {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Text-level contract every backbone honors. The pipeline only talks to
/// models through this trait, so an external model can be plugged in by
/// implementing it.
pub trait Seq2Seq: Send + Sync {
    fn generate(&self, input: &str, dc: &DecodeConfig) -> Result<String>;
    /// Per-token log-probabilities of `target` followed by the end token.
    fn score_target(&self, input: &str, target: &str) -> Result<Vec<f64>>;
    /// Catalog items ranked by their probability as the first output token.
    fn rank_items(&self, input: &str, catalog: &[Item]) -> Result<Vec<(String, f64)>>;
    fn vocab_digest(&self) -> String;
}

/// Named parameter set with its vocabulary and configuration.
#[derive(Debug, Clone)]
pub struct Backbone<F: Real = f32> {
    pub name: String,
    pub config: BackboneConfig,
    pub vocab: Arc<Vocabulary>,
    pub model: Transformer<F>,
}

impl<F: Real> Backbone<F> {
    pub fn new(name: impl Into<String>, config: BackboneConfig, vocab: Arc<Vocabulary>) -> Result<Self> {
        if config.d_model == 0 || config.heads == 0 || config.d_model % config.heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {} must be a positive multiple of the head count {}",
                config.d_model, config.heads
            )));
        }
        let model = Transformer::new(config.dims(vocab.len()), config.seed);
        Ok(Backbone {
            name: name.into(),
            config,
            vocab,
            model,
        })
    }

    /// Deep copy under a new name; parameters are never shared.
    pub fn clone_as(&self, name: impl Into<String>) -> Self {
        Backbone {
            name: name.into(),
            ..self.clone()
        }
    }

    pub fn param_count(&self) -> usize {
        self.model.params.len()
    }

    fn pair_ids(&self, pair: &SerializedPair) -> (Vec<TokenId>, Vec<TokenId>) {
        let src = if pair.input_ids.is_empty() {
            self.vocab.encode(&pair.input_text)
        } else {
            pair.input_ids.clone()
        };
        let tgt = if pair.target_ids.is_empty() {
            self.vocab.encode(&pair.target_text)
        } else {
            pair.target_ids.clone()
        };
        (src, tgt)
    }

    pub fn batch(&self, pairs: &[SerializedPair]) -> TokenBatch {
        let mut b = TokenBatch::default();
        for p in pairs {
            let (src, tgt) = self.pair_ids(p);
            b.push(src, &tgt, self.vocab.sos(), self.vocab.eos());
        }
        b
    }

    /// One optimizer step on `pairs`; returns the mean per-token loss
    /// before the update.
    pub fn train_batch(&mut self, pairs: &[SerializedPair], state: &mut TrainState<F>) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        let batch = self.batch(pairs);
        state.grads.clear();
        state.grads.resize(self.model.params.len(), F::zero());
        let drop = (self.config.dropout > 0.0).then(|| Dropout {
            rate: self.config.dropout,
            rng: &mut state.rng,
        });
        let loss = self.model.loss_and_grad(&batch, Some(&mut state.grads), drop)?;
        state.opt.step(&self.model.layout, &mut self.model.params, &state.grads);
        Ok(loss)
    }

    /// Mean per-token loss without updating anything.
    pub fn loss(&self, pairs: &[SerializedPair]) -> Result<f64> {
        let (sum, n) = self.nll(pairs)?;
        Ok(sum / n as f64)
    }

    /// Summed token NLL and token count (end tokens included).
    pub fn nll(&self, pairs: &[SerializedPair]) -> Result<(f64, usize)> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("no pairs to score".into()));
        }
        let batch = self.batch(pairs);
        let n = batch.target_tokens();
        let mean = self.model.loss_and_grad(&batch, None, None)?;
        Ok((mean * n as f64, n))
    }
}

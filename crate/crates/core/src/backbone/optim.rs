//! Decoupled-weight-decay Adam with global-norm gradient clipping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::Layout;
use super::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub cfg: OptimConfig,
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: OptimConfig, n_params: usize) -> Self {
        AdamW {
            cfg,
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Weight decay applies only to parameters whose spec marks them as
    /// decayed (weight matrices).
    pub fn step(&mut self, layout: &Layout, params: &mut [F], grads: &[F]) {
        self.t += 1;
        let c = self.cfg;
        let norm = grads.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (ob1, ob2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let step = F::of(c.lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(c.eps);
        let scale = F::of(scale);
        for spec in &layout.specs {
            let decay = if spec.decay { F::of(1.0 - c.lr * c.weight_decay) } else { F::one() };
            for i in spec.offset..spec.offset + spec.len {
                let g = grads[i] * scale;
                self.m[i] = b1 * self.m[i] + ob1 * g;
                self.v[i] = b2 * self.v[i] + ob2 * g * g;
                params[i] = params[i] * decay - step * self.m[i] / ((self.v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Everything a training loop mutates besides the parameters.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub opt: AdamW<F>,
    pub rng: ChaCha8Rng,
    pub grads: Vec<F>,
}

impl<F: Real> TrainState<F> {
    pub fn new(cfg: OptimConfig, n_params: usize, seed: u64) -> Self {
        TrainState {
            opt: AdamW::new(cfg, n_params),
            rng: ChaCha8Rng::seed_from_u64(seed),
            grads: Vec::with_capacity(n_params),
        }
    }
}

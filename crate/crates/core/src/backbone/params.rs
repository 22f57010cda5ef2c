//! Flat parameter storage with a named layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lin {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ln {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayer {
    pub ln1: Ln,
    pub qkv: Lin,
    pub o: Lin,
    pub ln2: Ln,
    pub ff1: Lin,
    pub ff2: Lin,
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayer {
    pub ln1: Ln,
    pub qkv: Lin,
    pub o: Lin,
    pub ln2: Ln,
    pub cq: Lin,
    pub ckv: Lin,
    pub co: Lin,
    pub ln3: Ln,
    pub ff1: Lin,
    pub ff2: Lin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Normal with the given standard deviation scale.
    Embedding,
    /// Normal with std `1/sqrt(fan_in)`.
    Weight { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub init: Init,
    pub decay: bool,
}

/// Model dimensions relevant to the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub vocab: usize,
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_pos: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub dims: Dims,
    pub tok_emb: usize,
    pub enc_pos: usize,
    pub dec_pos: usize,
    pub enc: Vec<EncLayer>,
    pub enc_ln: Ln,
    pub dec: Vec<DecLayer>,
    pub dec_ln: Ln,
    pub out: Lin,
    pub specs: Vec<ParamSpec>,
    pub total: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: String, len: usize, init: Init, decay: bool) -> usize {
        let offset = self.total;
        self.specs.push(ParamSpec {
            name,
            offset,
            len,
            init,
            decay,
        });
        self.total += len;
        offset
    }

    fn lin(&mut self, name: &str, inp: usize, out: usize) -> Lin {
        let w = self.push(format!("{name}.w"), inp * out, Init::Weight { fan_in: inp }, true);
        let b = self.push(format!("{name}.b"), out, Init::Zeros, false);
        Lin { w, b, inp, out }
    }

    fn ln(&mut self, name: &str, d: usize) -> Ln {
        let g = self.push(format!("{name}.g"), d, Init::Ones, false);
        let b = self.push(format!("{name}.b"), d, Init::Zeros, false);
        Ln { g, b }
    }
}

impl Layout {
    pub fn new(dims: Dims) -> Self {
        let Dims { vocab, d, ff, .. } = dims;
        let mut b = Builder {
            specs: Vec::new(),
            total: 0,
        };
        let tok_emb = b.push("tok_emb".into(), vocab * d, Init::Embedding, false);
        let enc_pos = b.push("enc_pos".into(), dims.max_pos * d, Init::Embedding, false);
        let dec_pos = b.push("dec_pos".into(), dims.max_pos * d, Init::Embedding, false);
        let enc = (0..dims.enc_layers)
            .map(|l| {
                let p = format!("enc{l}");
                EncLayer {
                    ln1: b.ln(&format!("{p}.ln1"), d),
                    qkv: b.lin(&format!("{p}.qkv"), d, 3 * d),
                    o: b.lin(&format!("{p}.o"), d, d),
                    ln2: b.ln(&format!("{p}.ln2"), d),
                    ff1: b.lin(&format!("{p}.ff1"), d, ff),
                    ff2: b.lin(&format!("{p}.ff2"), ff, d),
                }
            })
            .collect();
        let enc_ln = b.ln("enc_ln", d);
        let dec = (0..dims.dec_layers)
            .map(|l| {
                let p = format!("dec{l}");
                DecLayer {
                    ln1: b.ln(&format!("{p}.ln1"), d),
                    qkv: b.lin(&format!("{p}.qkv"), d, 3 * d),
                    o: b.lin(&format!("{p}.o"), d, d),
                    ln2: b.ln(&format!("{p}.ln2"), d),
                    cq: b.lin(&format!("{p}.cq"), d, d),
                    ckv: b.lin(&format!("{p}.ckv"), d, 2 * d),
                    co: b.lin(&format!("{p}.co"), d, d),
                    ln3: b.ln(&format!("{p}.ln3"), d),
                    ff1: b.lin(&format!("{p}.ff1"), d, ff),
                    ff2: b.lin(&format!("{p}.ff2"), ff, d),
                }
            })
            .collect();
        let dec_ln = b.ln("dec_ln", d);
        let out = b.lin("out", d, vocab);
        Layout {
            dims,
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out,
            specs: b.specs,
            total: b.total,
        }
    }

    /// Fresh parameters; every embedding row (base, special and item tokens
    /// alike) is drawn from the same normal distribution.
    pub fn init<F: Real>(&self, seed: u64) -> Vec<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![F::zero(); self.total];
        let emb = Normal::new(0.0, 0.1).unwrap();
        for spec in &self.specs {
            let slot = &mut data[spec.offset..spec.offset + spec.len];
            match spec.init {
                Init::Embedding => slot.iter_mut().for_each(|x| *x = F::of(emb.sample(&mut rng))),
                Init::Weight { fan_in } => {
                    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
                    slot.iter_mut().for_each(|x| *x = F::of(dist.sample(&mut rng)));
                }
                Init::Zeros => {}
                Init::Ones => slot.iter_mut().for_each(|x| *x = F::one()),
            }
        }
        data
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

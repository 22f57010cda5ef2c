//! Pre-LayerNorm encoder-decoder transformer with hand-written backward pass.
//!
//! Sequences of a batch are packed row-wise (no padding): every linear layer
//! runs as one GEMM over all tokens and attention runs per sequence and head
//! on strided views of the packed projections.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Dims, Layout, Lin, Ln};
use super::real::{gemm, Real, View, ViewMut};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Row offsets of packed sequences.
#[derive(Debug, Clone, Default)]
pub struct Segments {
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
    pub total: usize,
}

impl Segments {
    pub fn from_lens(lens: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Segments::default();
        for l in lens {
            s.starts.push(s.total);
            s.lens.push(l);
            s.total += l;
        }
        s
    }
}

/// Token ids of one training batch. `tgt_in` starts with `[sos]`,
/// `tgt_out` ends with `[eos]`.
#[derive(Debug, Clone, Default)]
pub struct TokenBatch {
    pub src: Vec<Vec<u32>>,
    pub tgt_in: Vec<Vec<u32>>,
    pub tgt_out: Vec<Vec<u32>>,
}

impl TokenBatch {
    pub fn push(&mut self, src: Vec<u32>, target: &[u32], sos: u32, eos: u32) {
        let mut tin = Vec::with_capacity(target.len() + 1);
        tin.push(sos);
        tin.extend_from_slice(target);
        let mut tout = target.to_vec();
        tout.push(eos);
        self.src.push(src);
        self.tgt_in.push(tin);
        self.tgt_out.push(tout);
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy)]
struct AttnSeg {
    q0: usize,
    nq: usize,
    k0: usize,
    nk: usize,
}

/// Packed matrix source: buffer, row stride, column offset.
#[derive(Clone, Copy)]
struct Src<'a, F> {
    buf: &'a [F],
    stride: usize,
    col: usize,
}

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct SelfAttnCache<F> {
    ln: LnCache<F>,
    h: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
    mask: Option<Vec<F>>,
}

struct CrossAttnCache<F> {
    ln: LnCache<F>,
    h: Vec<F>,
    q: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
    mask: Option<Vec<F>>,
}

struct FfCache<F> {
    ln: LnCache<F>,
    h: Vec<F>,
    act: Vec<F>,
    mask: Option<Vec<F>>,
}

struct EncLayerCache<F> {
    attn: SelfAttnCache<F>,
    ff: FfCache<F>,
}

struct DecLayerCache<F> {
    attn: SelfAttnCache<F>,
    cross: CrossAttnCache<F>,
    ff: FfCache<F>,
}

pub struct EncoderState<F> {
    pub out: Vec<F>,
    pub segs: Segments,
    emb_mask: Option<Vec<F>>,
    layers: Vec<EncLayerCache<F>>,
    final_ln: LnCache<F>,
}

struct DecoderState<F> {
    segs: Segments,
    emb_mask: Option<Vec<F>>,
    layers: Vec<DecLayerCache<F>>,
    final_ln: LnCache<F>,
    z: Vec<F>,
    logits: Vec<F>,
}

/// Dropout source used during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask<F: Real>(&mut self, len: usize) -> Vec<F> {
        let keep = F::of(1.0 / (1.0 - self.rate));
        (0..len)
            .map(|_| if self.rng.gen::<f64>() < self.rate { F::zero() } else { keep })
            .collect()
    }
}

fn maybe_mask<F: Real>(drop: &mut Option<Dropout<'_>>, len: usize) -> Option<Vec<F>> {
    match drop {
        Some(d) if d.rate > 0.0 => Some(d.mask(len)),
        _ => None,
    }
}

fn apply_mask<F: Real>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(a, &b)| *a *= b);
    }
}

fn linear_fwd<F: Real>(p: &[F], lin: Lin, x: &[F], n: usize) -> Vec<F> {
    let mut y = Vec::with_capacity(n * lin.out);
    let bias = &p[lin.b..lin.b + lin.out];
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    gemm(
        F::one(),
        View::dense(x, n, lin.inp),
        View::new(p, lin.w, lin.inp, lin.out, lin.out),
        F::one(),
        ViewMut::dense(&mut y, n, lin.out),
    );
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn linear_bwd<F: Real>(p: &[F], g: &mut [F], lin: Lin, x: &[F], dy: &[F], n: usize) -> Vec<F> {
    gemm(
        F::one(),
        View::dense(x, n, lin.inp).t(),
        View::dense(dy, n, lin.out),
        F::one(),
        ViewMut::new(g, lin.w, lin.inp, lin.out, lin.out),
    );
    let gb = &mut g[lin.b..lin.b + lin.out];
    for row in dy.chunks_exact(lin.out) {
        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    let mut dx = vec![F::zero(); n * lin.inp];
    gemm(
        F::one(),
        View::dense(dy, n, lin.out),
        View::new(p, lin.w, lin.inp, lin.out, lin.out).t(),
        F::zero(),
        ViewMut::dense(&mut dx, n, lin.inp),
    );
    dx
}

fn ln_fwd<F: Real>(p: &[F], ln: Ln, x: &[F], d: usize) -> (Vec<F>, LnCache<F>) {
    let n = x.len() / d;
    let gamma = &p[ln.g..ln.g + d];
    let beta = &p[ln.b..ln.b + d];
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(n);
    let inv_d = F::of(1.0 / d as f64);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().fold(F::zero(), |a, &b| a + b) * inv_d;
        let var = row.iter().fold(F::zero(), |a, &b| a + (b - mean) * (b - mean)) * inv_d;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * gamma[j] + beta[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn ln_bwd<F: Real>(p: &[F], g: &mut [F], ln: Ln, dy: &[F], c: &LnCache<F>, d: usize) -> Vec<F> {
    let n = dy.len() / d;
    let mut dx = vec![F::zero(); dy.len()];
    let inv_d = F::of(1.0 / d as f64);
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &c.xhat[r * d..(r + 1) * d];
        let mut sum_dxh = F::zero();
        let mut sum_dxh_xh = F::zero();
        for j in 0..d {
            g[ln.g + j] += dyr[j] * xh[j];
            g[ln.b + j] += dyr[j];
            let dxh = dyr[j] * p[ln.g + j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let rs = c.rstd[r];
        for j in 0..d {
            let dxh = dyr[j] * p[ln.g + j];
            dx[r * d + j] = rs * (dxh - sum_dxh * inv_d - xh[j] * sum_dxh_xh * inv_d);
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn attn_fwd<F: Real>(
    q: Src<'_, F>,
    k: Src<'_, F>,
    v: Src<'_, F>,
    segs: &[AttnSeg],
    nq_total: usize,
    heads: usize,
    dh: usize,
    causal: bool,
) -> (Vec<F>, Vec<F>) {
    let d = heads * dh;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut ctx = vec![F::zero(); nq_total * d];
    let prob_len: usize = segs.iter().map(|s| s.nq * s.nk * heads).sum();
    let mut probs = vec![F::zero(); prob_len];
    let mut p0 = 0;
    for s in segs {
        for h in 0..heads {
            let block = &mut probs[p0..p0 + s.nq * s.nk];
            gemm(
                scale,
                View::new(q.buf, s.q0 * q.stride + q.col + h * dh, s.nq, dh, q.stride),
                View::new(k.buf, s.k0 * k.stride + k.col + h * dh, s.nk, dh, k.stride).t(),
                F::zero(),
                ViewMut::dense(block, s.nq, s.nk),
            );
            for i in 0..s.nq {
                let row = &mut block[i * s.nk..(i + 1) * s.nk];
                let visible = if causal { (i + 1).min(s.nk) } else { s.nk };
                let mx = row[..visible].iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                let mut sum = F::zero();
                for x in &mut row[..visible] {
                    *x = (*x - mx).exp();
                    sum += *x;
                }
                for x in &mut row[..visible] {
                    *x /= sum;
                }
                for x in &mut row[visible..] {
                    *x = F::zero();
                }
            }
            gemm(
                F::one(),
                View::dense(block, s.nq, s.nk),
                View::new(v.buf, s.k0 * v.stride + v.col + h * dh, s.nk, dh, v.stride),
                F::zero(),
                ViewMut::new(&mut ctx, s.q0 * d + h * dh, s.nq, dh, d),
            );
            p0 += s.nq * s.nk;
        }
    }
    (ctx, probs)
}

/// Returns `(dq, dk, dv)`, dense with row width `heads * dh`.
#[allow(clippy::too_many_arguments)]
fn attn_bwd<F: Real>(
    dctx: &[F],
    probs: &[F],
    q: Src<'_, F>,
    k: Src<'_, F>,
    v: Src<'_, F>,
    segs: &[AttnSeg],
    nq_total: usize,
    nk_total: usize,
    heads: usize,
    dh: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = heads * dh;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![F::zero(); nq_total * d];
    let mut dk = vec![F::zero(); nk_total * d];
    let mut dv = vec![F::zero(); nk_total * d];
    let mut tmp: Vec<F> = Vec::new();
    let mut p0 = 0;
    for s in segs {
        for h in 0..heads {
            let pb = &probs[p0..p0 + s.nq * s.nk];
            tmp.clear();
            tmp.resize(s.nq * s.nk, F::zero());
            let dctx_h = View::new(dctx, s.q0 * d + h * dh, s.nq, dh, d);
            gemm(
                F::one(),
                dctx_h,
                View::new(v.buf, s.k0 * v.stride + v.col + h * dh, s.nk, dh, v.stride).t(),
                F::zero(),
                ViewMut::dense(&mut tmp, s.nq, s.nk),
            );
            gemm(
                F::one(),
                View::dense(pb, s.nq, s.nk).t(),
                dctx_h,
                F::one(),
                ViewMut::new(&mut dv, s.k0 * d + h * dh, s.nk, dh, d),
            );
            for i in 0..s.nq {
                let pr = &pb[i * s.nk..(i + 1) * s.nk];
                let tr = &mut tmp[i * s.nk..(i + 1) * s.nk];
                let dot = pr.iter().zip(tr.iter()).fold(F::zero(), |a, (&x, &y)| a + x * y);
                for (t, &pv) in tr.iter_mut().zip(pr) {
                    *t = pv * (*t - dot);
                }
            }
            gemm(
                scale,
                View::dense(&tmp, s.nq, s.nk),
                View::new(k.buf, s.k0 * k.stride + k.col + h * dh, s.nk, dh, k.stride),
                F::one(),
                ViewMut::new(&mut dq, s.q0 * d + h * dh, s.nq, dh, d),
            );
            gemm(
                scale,
                View::dense(&tmp, s.nq, s.nk).t(),
                View::new(q.buf, s.q0 * q.stride + q.col + h * dh, s.nq, dh, q.stride),
                F::one(),
                ViewMut::new(&mut dk, s.k0 * d + h * dh, s.nk, dh, d),
            );
            p0 += s.nq * s.nk;
        }
    }
    (dq, dk, dv)
}

fn interleave<F: Real>(parts: &[&[F]], d: usize, n: usize) -> Vec<F> {
    let w = d * parts.len();
    let mut out = vec![F::zero(); n * w];
    for r in 0..n {
        for (pi, part) in parts.iter().enumerate() {
            out[r * w + pi * d..r * w + (pi + 1) * d].copy_from_slice(&part[r * d..(r + 1) * d]);
        }
    }
    out
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

#[derive(Debug, Clone)]
pub struct Transformer<F: Real> {
    pub layout: Layout,
    pub params: Vec<F>,
}

impl<F: Real> Transformer<F> {
    pub fn new(dims: Dims, seed: u64) -> Self {
        let layout = Layout::new(dims);
        let params = layout.init(seed);
        Transformer { layout, params }
    }

    pub fn dims(&self) -> Dims {
        self.layout.dims
    }

    /// Zeroes the output projection so every decoding step is uniform over
    /// the vocabulary.
    pub fn make_output_uniform(&mut self) {
        let out = self.layout.out;
        self.params[out.w..out.w + out.inp * out.out].fill(F::zero());
        self.params[out.b..out.b + out.out].fill(F::zero());
    }

    fn check_len(&self, seqs: &[Vec<u32>]) -> Result<()> {
        let max = self.layout.dims.max_pos;
        match seqs.iter().map(Vec::len).max() {
            Some(len) if len > max => Err(Error::TooLong { len, max }),
            _ => Ok(()),
        }
    }

    fn embed(&self, seqs: &[Vec<u32>], pos: usize, segs: &Segments) -> Vec<F> {
        let d = self.layout.dims.d;
        let p = &self.params;
        let mut x = vec![F::zero(); segs.total * d];
        for (si, seq) in seqs.iter().enumerate() {
            for (t, &id) in seq.iter().enumerate() {
                let r = segs.starts[si] + t;
                let e = self.layout.tok_emb + id as usize * d;
                let pp = pos + t * d;
                for j in 0..d {
                    x[r * d + j] = p[e + j] + p[pp + j];
                }
            }
        }
        x
    }

    fn embed_bwd(&self, g: &mut [F], seqs: &[Vec<u32>], pos: usize, segs: &Segments, dx: &[F]) {
        let d = self.layout.dims.d;
        for (si, seq) in seqs.iter().enumerate() {
            for (t, &id) in seq.iter().enumerate() {
                let r = segs.starts[si] + t;
                let e = self.layout.tok_emb + id as usize * d;
                let pp = pos + t * d;
                for j in 0..d {
                    g[e + j] += dx[r * d + j];
                    g[pp + j] += dx[r * d + j];
                }
            }
        }
    }

    fn self_attn_fwd(
        &self,
        ln: Ln,
        qkv_lin: Lin,
        o_lin: Lin,
        x: &mut [F],
        segs: &Segments,
        causal: bool,
        drop: &mut Option<Dropout<'_>>,
    ) -> SelfAttnCache<F> {
        let Dims { d, heads, .. } = self.layout.dims;
        let n = segs.total;
        let p = &self.params;
        let (h, lnc) = ln_fwd(p, ln, x, d);
        let qkv = linear_fwd(p, qkv_lin, &h, n);
        let asegs: Vec<AttnSeg> = segs
            .starts
            .iter()
            .zip(&segs.lens)
            .map(|(&s, &l)| AttnSeg { q0: s, nq: l, k0: s, nk: l })
            .collect();
        let src = |col| Src { buf: &qkv, stride: 3 * d, col };
        let (ctx, probs) = attn_fwd(src(0), src(d), src(2 * d), &asegs, n, heads, d / heads, causal);
        let mut o = linear_fwd(p, o_lin, &ctx, n);
        let mask = maybe_mask(drop, o.len());
        apply_mask(&mut o, &mask);
        add_into(x, &o);
        SelfAttnCache {
            ln: lnc,
            h,
            qkv,
            probs,
            ctx,
            mask,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn self_attn_bwd(
        &self,
        g: &mut [F],
        ln: Ln,
        qkv_lin: Lin,
        o_lin: Lin,
        c: &SelfAttnCache<F>,
        segs: &Segments,
        dx: &mut [F],
    ) {
        let Dims { d, heads, .. } = self.layout.dims;
        let n = segs.total;
        let p = &self.params;
        let mut dout = dx.to_vec();
        apply_mask(&mut dout, &c.mask);
        let dctx = linear_bwd(p, g, o_lin, &c.ctx, &dout, n);
        let asegs: Vec<AttnSeg> = segs
            .starts
            .iter()
            .zip(&segs.lens)
            .map(|(&s, &l)| AttnSeg { q0: s, nq: l, k0: s, nk: l })
            .collect();
        let src = |col| Src { buf: &c.qkv, stride: 3 * d, col };
        let (dq, dk, dv) = attn_bwd(&dctx, &c.probs, src(0), src(d), src(2 * d), &asegs, n, n, heads, d / heads);
        let dqkv = interleave(&[&dq, &dk, &dv], d, n);
        let dh = linear_bwd(p, g, qkv_lin, &c.h, &dqkv, n);
        let dln = ln_bwd(p, g, ln, &dh, &c.ln, d);
        add_into(dx, &dln);
    }

    fn ff_fwd(&self, ln: Ln, ff1: Lin, ff2: Lin, x: &mut [F], drop: &mut Option<Dropout<'_>>) -> FfCache<F> {
        let d = self.layout.dims.d;
        let n = x.len() / d;
        let p = &self.params;
        let (h, lnc) = ln_fwd(p, ln, x, d);
        let mut act = linear_fwd(p, ff1, &h, n);
        act.iter_mut().for_each(|a| *a = a.max(F::zero()));
        let mut o = linear_fwd(p, ff2, &act, n);
        let mask = maybe_mask(drop, o.len());
        apply_mask(&mut o, &mask);
        add_into(x, &o);
        FfCache {
            ln: lnc,
            h,
            act,
            mask,
        }
    }

    fn ff_bwd(&self, g: &mut [F], ln: Ln, ff1: Lin, ff2: Lin, c: &FfCache<F>, dx: &mut [F]) {
        let d = self.layout.dims.d;
        let n = dx.len() / d;
        let p = &self.params;
        let mut dout = dx.to_vec();
        apply_mask(&mut dout, &c.mask);
        let mut dact = linear_bwd(p, g, ff2, &c.act, &dout, n);
        dact.iter_mut().zip(&c.act).for_each(|(da, &a)| {
            if a <= F::zero() {
                *da = F::zero()
            }
        });
        let dh = linear_bwd(p, g, ff1, &c.h, &dact, n);
        let dln = ln_bwd(p, g, ln, &dh, &c.ln, d);
        add_into(dx, &dln);
    }

    /// Runs the encoder over `src`.
    pub fn encode(&self, src: &[Vec<u32>], mut drop: Option<Dropout<'_>>) -> EncoderState<F> {
        let segs = Segments::from_lens(src.iter().map(Vec::len));
        let mut x = self.embed(src, self.layout.enc_pos, &segs);
        let emb_mask = maybe_mask(&mut drop, x.len());
        apply_mask(&mut x, &emb_mask);
        let mut layers = Vec::with_capacity(self.layout.enc.len());
        for l in &self.layout.enc {
            let attn = self.self_attn_fwd(l.ln1, l.qkv, l.o, &mut x, &segs, false, &mut drop);
            let ff = self.ff_fwd(l.ln2, l.ff1, l.ff2, &mut x, &mut drop);
            layers.push(EncLayerCache { attn, ff });
        }
        let (out, final_ln) = ln_fwd(&self.params, self.layout.enc_ln, &x, self.layout.dims.d);
        EncoderState {
            out,
            segs,
            emb_mask,
            layers,
            final_ln,
        }
    }

    /// Cross-attention keys/values of every decoder layer for an encoding.
    pub fn cross_kv(&self, enc: &EncoderState<F>) -> Vec<Vec<F>> {
        self.layout
            .dec
            .iter()
            .map(|l| linear_fwd(&self.params, l.ckv, &enc.out, enc.segs.total))
            .collect()
    }

    fn decode_inner(
        &self,
        tgt_in: &[Vec<u32>],
        enc_segs: &Segments,
        enc_of: &[usize],
        kv: &[Vec<F>],
        mut drop: Option<Dropout<'_>>,
        rows: Option<&[usize]>,
    ) -> DecoderState<F> {
        let Dims { d, heads, vocab, .. } = self.layout.dims;
        let p = &self.params;
        let segs = Segments::from_lens(tgt_in.iter().map(Vec::len));
        let n = segs.total;
        let mut y = self.embed(tgt_in, self.layout.dec_pos, &segs);
        let emb_mask = maybe_mask(&mut drop, y.len());
        apply_mask(&mut y, &emb_mask);
        let csegs: Vec<AttnSeg> = (0..tgt_in.len())
            .map(|i| AttnSeg {
                q0: segs.starts[i],
                nq: segs.lens[i],
                k0: enc_segs.starts[enc_of[i]],
                nk: enc_segs.lens[enc_of[i]],
            })
            .collect();
        let mut layers = Vec::with_capacity(self.layout.dec.len());
        for (li, l) in self.layout.dec.iter().enumerate() {
            let attn = self.self_attn_fwd(l.ln1, l.qkv, l.o, &mut y, &segs, true, &mut drop);

            let (h, lnc) = ln_fwd(p, l.ln2, &y, d);
            let q = linear_fwd(p, l.cq, &h, n);
            let (ctx, probs) = attn_fwd(
                Src { buf: &q, stride: d, col: 0 },
                Src { buf: &kv[li], stride: 2 * d, col: 0 },
                Src { buf: &kv[li], stride: 2 * d, col: d },
                &csegs,
                n,
                heads,
                d / heads,
                false,
            );
            let mut o = linear_fwd(p, l.co, &ctx, n);
            let mask = maybe_mask(&mut drop, o.len());
            apply_mask(&mut o, &mask);
            add_into(&mut y, &o);
            let cross = CrossAttnCache {
                ln: lnc,
                h,
                q,
                probs,
                ctx,
                mask,
            };

            let ff = self.ff_fwd(l.ln3, l.ff1, l.ff2, &mut y, &mut drop);
            layers.push(DecLayerCache { attn, cross, ff });
        }
        let (z, final_ln) = ln_fwd(p, self.layout.dec_ln, &y, d);
        let logits = match rows {
            None => linear_fwd(p, self.layout.out, &z, n),
            Some(rows) => {
                let mut zr = Vec::with_capacity(rows.len() * d);
                for &r in rows {
                    zr.extend_from_slice(&z[r * d..(r + 1) * d]);
                }
                linear_fwd(p, self.layout.out, &zr, rows.len())
            }
        };
        debug_assert_eq!(logits.len() % vocab, 0);
        DecoderState {
            segs,
            emb_mask,
            layers,
            final_ln,
            z,
            logits,
        }
    }

    /// Logits (row per requested position, `vocab` wide) for decoder inputs
    /// that attend to sequence `enc_of[i]` of an existing encoding.
    pub fn decoder_logits(
        &self,
        tgt_in: &[Vec<u32>],
        enc: &EncoderState<F>,
        enc_of: &[usize],
        kv: &[Vec<F>],
        rows: Option<&[usize]>,
    ) -> Vec<F> {
        self.decode_inner(tgt_in, &enc.segs, enc_of, kv, None, rows).logits
    }

    /// Mean per-token NLL of the batch; when `grads` is given, accumulates
    /// the gradient of that mean.
    pub fn loss_and_grad(
        &self,
        batch: &TokenBatch,
        grads: Option<&mut [F]>,
        mut drop: Option<Dropout<'_>>,
    ) -> Result<f64> {
        self.check_len(&batch.src)?;
        self.check_len(&batch.tgt_in)?;
        let Dims { d, heads, vocab, .. } = self.layout.dims;
        let enc = self.encode(&batch.src, drop.as_mut().map(|x| Dropout { rate: x.rate, rng: &mut *x.rng }));
        let kv = self.cross_kv(&enc);
        let enc_of: Vec<usize> = (0..batch.src.len()).collect();
        let dec = self.decode_inner(&batch.tgt_in, &enc.segs, &enc_of, &kv, drop, None);
        let n = dec.segs.total;

        let targets: Vec<u32> = batch.tgt_out.iter().flatten().copied().collect();
        let mut nll = 0.0f64;
        let mut dlogits = if grads.is_some() { vec![F::zero(); n * vocab] } else { Vec::new() };
        let inv_n = F::of(1.0 / n as f64);
        for r in 0..n {
            let row = &dec.logits[r * vocab..(r + 1) * vocab];
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let sum = row.iter().fold(F::zero(), |a, &b| a + (b - mx).exp());
            let lse = mx + sum.ln();
            let t = targets[r] as usize;
            nll += (lse - row[t]).to_f64().unwrap();
            if !dlogits.is_empty() {
                let dr = &mut dlogits[r * vocab..(r + 1) * vocab];
                for (j, x) in row.iter().enumerate() {
                    dr[j] = (*x - lse).exp() * inv_n;
                }
                dr[t] -= inv_n;
            }
        }
        let loss = nll / n as f64;
        let Some(g) = grads else {
            return Ok(loss);
        };

        let p = &self.params;
        let l = &self.layout;
        let dz = linear_bwd(p, g, l.out, &dec.z, &dlogits, n);
        let mut dy = ln_bwd(p, g, l.dec_ln, &dz, &dec.final_ln, d);
        let ne = enc.segs.total;
        let mut denc = vec![F::zero(); ne * d];
        let csegs: Vec<AttnSeg> = (0..batch.tgt_in.len())
            .map(|i| AttnSeg {
                q0: dec.segs.starts[i],
                nq: dec.segs.lens[i],
                k0: enc.segs.starts[i],
                nk: enc.segs.lens[i],
            })
            .collect();
        for (li, lay) in l.dec.iter().enumerate().rev() {
            let c = &dec.layers[li];
            self.ff_bwd(g, lay.ln3, lay.ff1, lay.ff2, &c.ff, &mut dy);

            let cc = &c.cross;
            let mut dout = dy.clone();
            apply_mask(&mut dout, &cc.mask);
            let dctx = linear_bwd(p, g, lay.co, &cc.ctx, &dout, n);
            let (dq, dk, dv) = attn_bwd(
                &dctx,
                &cc.probs,
                Src { buf: &cc.q, stride: d, col: 0 },
                Src { buf: &kv[li], stride: 2 * d, col: 0 },
                Src { buf: &kv[li], stride: 2 * d, col: d },
                &csegs,
                n,
                ne,
                heads,
                d / heads,
            );
            let dkv = interleave(&[&dk, &dv], d, ne);
            let de = linear_bwd(p, g, lay.ckv, &enc.out, &dkv, ne);
            add_into(&mut denc, &de);
            let dh = linear_bwd(p, g, lay.cq, &cc.h, &dq, n);
            let dln = ln_bwd(p, g, lay.ln2, &dh, &cc.ln, d);
            add_into(&mut dy, &dln);

            self.self_attn_bwd(g, lay.ln1, lay.qkv, lay.o, &c.attn, &dec.segs, &mut dy);
        }
        apply_mask(&mut dy, &dec.emb_mask);
        self.embed_bwd(g, &batch.tgt_in, l.dec_pos, &dec.segs, &dy);

        let mut dx = ln_bwd(p, g, l.enc_ln, &denc, &enc.final_ln, d);
        for (li, lay) in l.enc.iter().enumerate().rev() {
            let c = &enc.layers[li];
            self.ff_bwd(g, lay.ln2, lay.ff1, lay.ff2, &c.ff, &mut dx);
            self.self_attn_bwd(g, lay.ln1, lay.qkv, lay.o, &c.attn, &enc.segs, &mut dx);
        }
        apply_mask(&mut dx, &enc.emb_mask);
        self.embed_bwd(g, &batch.src, l.enc_pos, &enc.segs, &dx);
        Ok(loss)
    }
}

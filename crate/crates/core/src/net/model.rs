//! Forward and reverse-mode passes of the score transformer.
//!
//! Layout per block (adaLN-Zero, pre-norm):
//!
//! ```text
//! mod = silu(c) W_ada + b_ada = [shift1 scale1 gate1 shift2 scale2 gate2]
//! x += gate1 * Attn(LN(x) * (1 + scale1) + shift1)     (rotary q/k)
//! x += gate2 * MLP(LN(x) * (1 + scale2) + shift2)      (GELU)
//! ```
//!
//! followed by a modulated final norm and a linear head whose outputs are
//! log-scores.

use std::ops::Range;

use super::ops::*;
use super::ScoreNetwork;
use crate::tokens::TokenId;

pub(crate) struct BlockCache {
    n1: Vec<f64>,
    rstd1: Vec<f64>,
    modv: Vec<f64>,
    u1: Vec<f64>,
    /// Head-major `[H][L][dh]`, rotated.
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[H][L][L]`
    probs: Vec<f64>,
    o: Vec<f64>,
    a: Vec<f64>,
    n2: Vec<f64>,
    rstd2: Vec<f64>,
    u2: Vec<f64>,
    z1: Vec<f64>,
    hdn: Vec<f64>,
    mo: Vec<f64>,
}

/// Activations saved by a forward pass, consumed by the backward pass.
pub struct ForwardRecord {
    pub(crate) ids: Vec<TokenId>,
    pub(crate) offset: usize,
    tfeat: Vec<f64>,
    h1: Vec<f64>,
    a1: Vec<f64>,
    c: Vec<f64>,
    sc: Vec<f64>,
    blocks: Vec<BlockCache>,
    nf: Vec<f64>,
    rstdf: Vec<f64>,
    fmod: Vec<f64>,
    uf: Vec<f64>,
    /// `L × N`, exp of the head outputs.
    pub(crate) scores: Vec<f64>,
}

impl std::fmt::Debug for ForwardRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardRecord")
            .field("len", &self.ids.len())
            .field("offset", &self.offset)
            .finish_non_exhaustive()
    }
}

fn modulate(n: &[f64], shift: &[f64], scale: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n.len()];
    for (o, r) in out.chunks_mut(d).zip(n.chunks(d)) {
        for j in 0..d {
            o[j] = r[j] * (1.0 + scale[j]) + shift[j];
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    let w = b.len();
    for row in x.chunks_mut(w) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn add_gated(x: &mut [f64], gate: &[f64], y: &[f64]) {
    let d = gate.len();
    for (xr, yr) in x.chunks_mut(d).zip(y.chunks(d)) {
        for j in 0..d {
            xr[j] += gate[j] * yr[j];
        }
    }
}

fn col_sum_into(x: &[f64], out: &mut [f64]) {
    let w = out.len();
    for row in x.chunks(w) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Σ_rows a⊙b into `out`.
fn col_dot_into(a: &[f64], b: &[f64], out: &mut [f64]) {
    let w = out.len();
    for (ra, rb) in a.chunks(w).zip(b.chunks(w)) {
        for j in 0..w {
            out[j] += ra[j] * rb[j];
        }
    }
}

/// Gradient of `u = n ⊙ (1 + scale) + shift` (row-broadcast): writes
/// `dshift`, `dscale` and returns `dn`.
fn modulate_backward(
    n: &[f64],
    du: &[f64],
    scale: &[f64],
    dshift: &mut [f64],
    dscale: &mut [f64],
) -> Vec<f64> {
    let d = scale.len();
    col_sum_into(du, dshift);
    col_dot_into(du, n, dscale);
    let mut dn = du.to_vec();
    for row in dn.chunks_mut(d) {
        for j in 0..d {
            row[j] *= 1.0 + scale[j];
        }
    }
    dn
}

/// Offset added to every logit: ln(ᾱ/(1-ᾱ)/N) under the default
/// log-linear schedule. The exact score's row sum at a masked position is
/// ᾱ/(1-ᾱ), so a fresh network starts on the right scale and Euler steps stay
/// bounded by dt/t.
pub fn log_prior(t: f64, vocab: usize) -> f64 {
    const DELTA: f64 = 1e-3;
    let masked = (1.0 - DELTA) * t.max(1e-6);
    ((1.0 - masked) / masked).ln() - (vocab as f64).ln()
}

impl ScoreNetwork {
    fn p(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    /// Forward pass. `offset` is the absolute position of `ids[0]` for the
    /// rotary encoding; keys outside `valid` are hidden from attention.
    pub(crate) fn forward_record(
        &self,
        ids: &[TokenId],
        t: f64,
        offset: usize,
        valid: Range<usize>,
    ) -> ForwardRecord {
        let cfg = &self.config;
        let (l, d, h, dh, m, n) = (ids.len(), cfg.dim, cfg.heads, cfg.head_dim(), cfg.hidden(), cfg.vocab());
        let f = cfg.time_features;
        let s = &self.slots;

        let tfeat = timestep_embedding(t, f);
        let mut h1 = self.p(s.time_b1, d).to_vec();
        matmul(&tfeat, self.p(s.time_w1, f * d), &mut h1, 1, f, d, true);
        let a1: Vec<f64> = h1.iter().map(|&v| silu(v)).collect();
        let mut c = self.p(s.time_b2, d).to_vec();
        matmul(&a1, self.p(s.time_w2, d * d), &mut c, 1, d, d, true);
        let sc: Vec<f64> = c.iter().map(|&v| silu(v)).collect();

        let emb = self.p(s.tok_emb, (n + 1) * d);
        let mut x = Vec::with_capacity(l * d);
        for &id in ids {
            x.extend_from_slice(&emb[id as usize * d..(id as usize + 1) * d]);
        }

        let (cos, sin) = rope_tables(offset, l, dh);
        let half = dh / 2;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for bs in &s.blocks {
            let mut modv = self.p(bs.ada_b, 6 * d).to_vec();
            matmul(&sc, self.p(bs.ada_w, d * 6 * d), &mut modv, 1, d, 6 * d, true);
            let (shift1, scale1, gate1) = (&modv[0..d], &modv[d..2 * d], &modv[2 * d..3 * d]);
            let (shift2, scale2, gate2) = (&modv[3 * d..4 * d], &modv[4 * d..5 * d], &modv[5 * d..6 * d]);

            let mut n1 = vec![0.0; l * d];
            let rstd1 = layer_norm(&x, &mut n1, d);
            let u1 = modulate(&n1, shift1, scale1, d);
            let mut qkv = vec![0.0; l * 3 * d];
            matmul(&u1, self.p(bs.wqkv, d * 3 * d), &mut qkv, l, d, 3 * d, false);

            let mut q = vec![0.0; h * l * dh];
            let mut k = vec![0.0; h * l * dh];
            let mut v = vec![0.0; h * l * dh];
            for hh in 0..h {
                for i in 0..l {
                    let dst = (hh * l + i) * dh;
                    let src = i * 3 * d + hh * dh;
                    q[dst..dst + dh].copy_from_slice(&qkv[src..src + dh]);
                    k[dst..dst + dh].copy_from_slice(&qkv[src + d..src + d + dh]);
                    v[dst..dst + dh].copy_from_slice(&qkv[src + 2 * d..src + 2 * d + dh]);
                    let (cs, sn) = (&cos[i * half..(i + 1) * half], &sin[i * half..(i + 1) * half]);
                    rope_apply(&mut q[dst..dst + dh], cs, sn, false);
                    rope_apply(&mut k[dst..dst + dh], cs, sn, false);
                }
            }

            let mut probs = vec![0.0; h * l * l];
            let mut o = vec![0.0; l * d];
            let mut oh = vec![0.0; l * dh];
            for hh in 0..h {
                let qs = &q[hh * l * dh..(hh + 1) * l * dh];
                let ks = &k[hh * l * dh..(hh + 1) * l * dh];
                let vs = &v[hh * l * dh..(hh + 1) * l * dh];
                let pr = &mut probs[hh * l * l..(hh + 1) * l * l];
                matmul_nt(qs, ks, pr, l, dh, l, false);
                for row in pr.chunks_mut(l) {
                    let mut mx = f64::NEG_INFINITY;
                    for j in valid.clone() {
                        row[j] *= inv_sqrt;
                        mx = mx.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for (j, e) in row.iter_mut().enumerate() {
                        if valid.contains(&j) {
                            *e = (*e - mx).exp();
                            sum += *e;
                        } else {
                            *e = 0.0;
                        }
                    }
                    row.iter_mut().for_each(|e| *e /= sum);
                }
                matmul(pr, vs, &mut oh, l, l, dh, false);
                for i in 0..l {
                    o[i * d + hh * dh..i * d + (hh + 1) * dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
                }
            }
            let mut a = vec![0.0; l * d];
            matmul(&o, self.p(bs.wo, d * d), &mut a, l, d, d, false);
            add_gated(&mut x, gate1, &a);

            let mut n2 = vec![0.0; l * d];
            let rstd2 = layer_norm(&x, &mut n2, d);
            let u2 = modulate(&n2, shift2, scale2, d);
            let mut z1 = vec![0.0; l * m];
            matmul(&u2, self.p(bs.w1, d * m), &mut z1, l, d, m, false);
            add_bias(&mut z1, self.p(bs.b1, m));
            let hdn: Vec<f64> = z1.iter().map(|&v| gelu(v)).collect();
            let mut mo = vec![0.0; l * d];
            matmul(&hdn, self.p(bs.w2, m * d), &mut mo, l, m, d, false);
            add_bias(&mut mo, self.p(bs.b2, d));
            add_gated(&mut x, gate2, &mo);

            blocks.push(BlockCache {
                n1,
                rstd1,
                modv: modv.clone(),
                u1,
                q,
                k,
                v,
                probs,
                o,
                a,
                n2,
                rstd2,
                u2,
                z1,
                hdn,
                mo,
            });
        }

        let mut fmod = self.p(s.final_ada_b, 2 * d).to_vec();
        matmul(&sc, self.p(s.final_ada_w, d * 2 * d), &mut fmod, 1, d, 2 * d, true);
        let mut nf = vec![0.0; l * d];
        let rstdf = layer_norm(&x, &mut nf, d);
        let uf = modulate(&nf, &fmod[..d], &fmod[d..], d);
        let mut logits = vec![0.0; l * n];
        matmul(&uf, self.p(s.head_w, d * n), &mut logits, l, d, n, false);
        add_bias(&mut logits, self.p(s.head_b, n));
        let prior = log_prior(t, n);
        let scores = logits.iter().map(|v| (v + prior).exp()).collect();

        ForwardRecord {
            ids: ids.to_vec(),
            offset,
            tfeat,
            h1,
            a1,
            c,
            sc,
            blocks,
            nf,
            rstdf,
            fmod,
            uf,
            scores,
        }
    }

    /// Accumulates into `grad` the parameter gradient for the cotangent
    /// `dscore` (`L × N`) of the scores produced by `rec`.
    pub(crate) fn backward_record(&self, rec: &ForwardRecord, dscore: &[f64], grad: &mut [f64]) {
        let cfg = &self.config;
        let l = rec.ids.len();
        let (d, h, dh, m, n) = (cfg.dim, cfg.heads, cfg.head_dim(), cfg.hidden(), cfg.vocab());
        let f = cfg.time_features;
        let s = &self.slots;
        let half = dh / 2;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        // scores = exp(logits)
        let dlogits: Vec<f64> = dscore.iter().zip(&rec.scores).map(|(g, s)| g * s).collect();
        matmul_tn(&rec.uf, &dlogits, &mut grad[s.head_w..s.head_w + d * n], d, l, n, true);
        col_sum_into(&dlogits, &mut grad[s.head_b..s.head_b + n]);
        let mut duf = vec![0.0; l * d];
        matmul_nt(&dlogits, self.p(s.head_w, d * n), &mut duf, l, n, d, false);

        let mut dfmod = vec![0.0; 2 * d];
        let dnf = {
            let (dshift, dscale) = dfmod.split_at_mut(d);
            modulate_backward(&rec.nf, &duf, &rec.fmod[d..], dshift, dscale)
        };
        let mut dsc = vec![0.0; d];
        ada_backward(&rec.sc, &dfmod, self.p(s.final_ada_w, d * 2 * d), grad, s.final_ada_w, s.final_ada_b, &mut dsc);
        let mut dx = vec![0.0; l * d];
        layer_norm_backward(&rec.nf, &dnf, &rec.rstdf, &mut dx, d);

        let (cos, sin) = rope_tables(rec.offset, l, dh);
        for (bs, bc) in s.blocks.iter().zip(&rec.blocks).rev() {
            let modv = &bc.modv;
            let (scale1, gate1) = (&modv[d..2 * d], &modv[2 * d..3 * d]);
            let (scale2, gate2) = (&modv[4 * d..5 * d], &modv[5 * d..6 * d]);
            let mut dmod = vec![0.0; 6 * d];

            // MLP branch
            col_dot_into(&dx, &bc.mo, &mut dmod[5 * d..6 * d]);
            let mut dmo = dx.clone();
            for row in dmo.chunks_mut(d) {
                for j in 0..d {
                    row[j] *= gate2[j];
                }
            }
            matmul_tn(&bc.hdn, &dmo, &mut grad[bs.w2..bs.w2 + m * d], m, l, d, true);
            col_sum_into(&dmo, &mut grad[bs.b2..bs.b2 + d]);
            let mut dz1 = vec![0.0; l * m];
            matmul_nt(&dmo, self.p(bs.w2, m * d), &mut dz1, l, d, m, false);
            for (g, &z) in dz1.iter_mut().zip(&bc.z1) {
                *g *= gelu_grad(z);
            }
            matmul_tn(&bc.u2, &dz1, &mut grad[bs.w1..bs.w1 + d * m], d, l, m, true);
            col_sum_into(&dz1, &mut grad[bs.b1..bs.b1 + m]);
            let mut du2 = vec![0.0; l * d];
            matmul_nt(&dz1, self.p(bs.w1, d * m), &mut du2, l, m, d, false);
            let dn2 = {
                let (lo, hi) = dmod.split_at_mut(4 * d);
                modulate_backward(&bc.n2, &du2, scale2, &mut lo[3 * d..4 * d], &mut hi[..d])
            };
            layer_norm_backward(&bc.n2, &dn2, &bc.rstd2, &mut dx, d);

            // attention branch
            col_dot_into(&dx, &bc.a, &mut dmod[2 * d..3 * d]);
            let mut da = dx.clone();
            for row in da.chunks_mut(d) {
                for j in 0..d {
                    row[j] *= gate1[j];
                }
            }
            matmul_tn(&bc.o, &da, &mut grad[bs.wo..bs.wo + d * d], d, l, d, true);
            let mut dobuf = vec![0.0; l * d];
            matmul_nt(&da, self.p(bs.wo, d * d), &mut dobuf, l, d, d, false);

            let mut dqkv = vec![0.0; l * 3 * d];
            let mut doh = vec![0.0; l * dh];
            let mut dp = vec![0.0; l * l];
            let mut dqh = vec![0.0; l * dh];
            let mut dkh = vec![0.0; l * dh];
            let mut dvh = vec![0.0; l * dh];
            for hh in 0..h {
                for i in 0..l {
                    doh[i * dh..(i + 1) * dh].copy_from_slice(&dobuf[i * d + hh * dh..i * d + (hh + 1) * dh]);
                }
                let qs = &bc.q[hh * l * dh..(hh + 1) * l * dh];
                let ks = &bc.k[hh * l * dh..(hh + 1) * l * dh];
                let vs = &bc.v[hh * l * dh..(hh + 1) * l * dh];
                let pr = &bc.probs[hh * l * l..(hh + 1) * l * l];
                matmul_nt(&doh, vs, &mut dp, l, dh, l, false);
                matmul_tn(pr, &doh, &mut dvh, l, l, dh, false);
                for (prow, drow) in pr.chunks(l).zip(dp.chunks_mut(l)) {
                    let dotp: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (g, &pv) in drow.iter_mut().zip(prow) {
                        *g = pv * (*g - dotp) * inv_sqrt;
                    }
                }
                matmul(&dp, ks, &mut dqh, l, l, dh, false);
                matmul_tn(&dp, qs, &mut dkh, l, l, dh, false);
                for i in 0..l {
                    let (cs, sn) = (&cos[i * half..(i + 1) * half], &sin[i * half..(i + 1) * half]);
                    rope_apply(&mut dqh[i * dh..(i + 1) * dh], cs, sn, true);
                    rope_apply(&mut dkh[i * dh..(i + 1) * dh], cs, sn, true);
                    let base = i * 3 * d + hh * dh;
                    dqkv[base..base + dh].copy_from_slice(&dqh[i * dh..(i + 1) * dh]);
                    dqkv[base + d..base + d + dh].copy_from_slice(&dkh[i * dh..(i + 1) * dh]);
                    dqkv[base + 2 * d..base + 2 * d + dh].copy_from_slice(&dvh[i * dh..(i + 1) * dh]);
                }
            }
            matmul_tn(&bc.u1, &dqkv, &mut grad[bs.wqkv..bs.wqkv + d * 3 * d], d, l, 3 * d, true);
            let mut du1 = vec![0.0; l * d];
            matmul_nt(&dqkv, self.p(bs.wqkv, d * 3 * d), &mut du1, l, 3 * d, d, false);
            let dn1 = {
                let (lo, hi) = dmod.split_at_mut(d);
                modulate_backward(&bc.n1, &du1, scale1, lo, &mut hi[..d])
            };
            layer_norm_backward(&bc.n1, &dn1, &bc.rstd1, &mut dx, d);

            ada_backward(&rec.sc, &dmod, self.p(bs.ada_w, d * 6 * d), grad, bs.ada_w, bs.ada_b, &mut dsc);
        }

        for (i, &id) in rec.ids.iter().enumerate() {
            let row = s.tok_emb + id as usize * d;
            for j in 0..d {
                grad[row + j] += dx[i * d + j];
            }
        }

        // time MLP
        let dc: Vec<f64> = dsc.iter().zip(&rec.c).map(|(g, &c)| g * silu_grad(c)).collect();
        matmul_tn(&rec.a1, &dc, &mut grad[s.time_w2..s.time_w2 + d * d], d, 1, d, true);
        col_sum_into(&dc, &mut grad[s.time_b2..s.time_b2 + d]);
        let mut da1 = vec![0.0; d];
        matmul_nt(&dc, self.p(s.time_w2, d * d), &mut da1, 1, d, d, false);
        let dh1: Vec<f64> = da1.iter().zip(&rec.h1).map(|(g, &x)| g * silu_grad(x)).collect();
        matmul_tn(&rec.tfeat, &dh1, &mut grad[s.time_w1..s.time_w1 + f * d], f, 1, d, true);
        col_sum_into(&dh1, &mut grad[s.time_b1..s.time_b1 + d]);
    }
}

/// Backward through `mod = sc · W + b` for one conditioning projection.
fn ada_backward(
    sc: &[f64],
    dmod: &[f64],
    w: &[f64],
    grad: &mut [f64],
    w_off: usize,
    b_off: usize,
    dsc: &mut [f64],
) {
    let (d, k) = (sc.len(), dmod.len());
    matmul_tn(sc, dmod, &mut grad[w_off..w_off + d * k], d, 1, k, true);
    col_sum_into(dmod, &mut grad[b_off..b_off + k]);
    matmul_nt(dmod, w, dsc, 1, k, d, true);
}

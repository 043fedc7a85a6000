//! One conditioned transformer block: modulated self-attention, context
//! cross-attention (text for the backbone, video for the refiner), windowed
//! audio cross-attention, and a feed-forward, each wrapped as
//! `x + alpha . Sub(modulate(LN(x)))` with modulation parameters produced
//! from the conditioning vector. Zero-initialized modulation makes every
//! block start as the identity.

use super::attention::{AttnGroup, MhAttention};
use super::layers::{
    gate_bwd, gelu_bwd, gelu_fwd, layernorm_bwd, layernorm_fwd, modulate_bwd, modulate_fwd,
    Linear, LnCache,
};
use super::params::{Grads, Init, ParamSet};
use crate::rng::Stream;

/// gamma/beta/alpha triples for the four sublayers.
const MOD_SLOTS: usize = 12;

#[derive(Debug, Clone)]
pub struct Block {
    pub adaln: Linear,
    pub self_attn: MhAttention,
    pub ctx_attn: MhAttention,
    pub audio_attn: MhAttention,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub dim: usize,
}

/// Per-call attention wiring. Key/value token buffers live outside the block.
pub struct BlockInputs<'a> {
    pub self_groups: &'a [AttnGroup],
    pub ctx_kv: Option<(&'a [f64], usize, &'a [AttnGroup])>,
    pub audio_kv: Option<(&'a [f64], usize, &'a [AttnGroup])>,
    /// Conditioning vector (one row of `dim`).
    pub cond: &'a [f64],
}

pub struct SubCache {
    ln: LnCache,
    mod_out: Vec<f64>,
    attn: Option<super::attention::AttnCache>,
    /// FFN intermediates: pre-activation and activated hidden.
    ffn_h: Option<(Vec<f64>, Vec<f64>)>,
    out: Vec<f64>,
}

pub struct BlockCache {
    mods: Vec<f64>,
    self_c: SubCache,
    ctx_c: Option<SubCache>,
    audio_c: Option<SubCache>,
    ffn_c: SubCache,
}

/// Gradients a block hands back to its caller.
pub struct BlockGrads {
    pub dx: Vec<f64>,
    pub dcond: Vec<f64>,
    pub dctx_kv: Option<Vec<f64>>,
    pub daudio_kv: Option<Vec<f64>>,
}

impl Block {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut Stream,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Block {
        Block {
            adaln: Linear::init(ps, rng, &format!("{name}.adaln"), dim, MOD_SLOTS * dim, Init::Zeros),
            self_attn: MhAttention::init(ps, rng, &format!("{name}.self_attn"), dim, heads),
            ctx_attn: MhAttention::init(ps, rng, &format!("{name}.ctx_attn"), dim, heads),
            audio_attn: MhAttention::init(ps, rng, &format!("{name}.audio_attn"), dim, heads),
            ffn1: Linear::init_default(ps, rng, &format!("{name}.ffn1"), dim, ffn_mult * dim),
            ffn2: Linear::init_default(ps, rng, &format!("{name}.ffn2"), ffn_mult * dim, dim),
            dim,
        }
    }

    pub fn forward(
        &self,
        ps: &ParamSet,
        x: &mut Vec<f64>,
        n: usize,
        inputs: &BlockInputs<'_>,
    ) -> BlockCache {
        let d = self.dim;
        let mods = self.adaln.forward(ps, inputs.cond, 1);
        let slot = |i: usize| &mods[i * d..(i + 1) * d];

        fn gated_add(x: &mut [f64], out: &[f64], alpha: &[f64], n: usize, d: usize) {
            for r in 0..n {
                for i in 0..d {
                    x[r * d + i] += alpha[i] * out[r * d + i];
                }
            }
        }

        let self_c = {
            let ln = layernorm_fwd(x, n, d);
            let mod_out = modulate_fwd(&ln.y, slot(0), slot(1), n, d);
            let (out, cache) =
                self.self_attn.forward(ps, &mod_out, n, &mod_out, n, inputs.self_groups);
            gated_add(x, &out, slot(2), n, d);
            SubCache { ln, mod_out, attn: Some(cache), ffn_h: None, out }
        };

        let ctx_c = inputs.ctx_kv.map(|(kvbuf, kvn, groups)| {
            let ln = layernorm_fwd(x, n, d);
            let mod_out = modulate_fwd(&ln.y, slot(3), slot(4), n, d);
            let (out, cache) = self.ctx_attn.forward(ps, &mod_out, n, kvbuf, kvn, groups);
            gated_add(x, &out, slot(5), n, d);
            SubCache { ln, mod_out, attn: Some(cache), ffn_h: None, out }
        });

        let audio_c = inputs.audio_kv.map(|(kvbuf, kvn, groups)| {
            let ln = layernorm_fwd(x, n, d);
            let mod_out = modulate_fwd(&ln.y, slot(6), slot(7), n, d);
            let (out, cache) = self.audio_attn.forward(ps, &mod_out, n, kvbuf, kvn, groups);
            gated_add(x, &out, slot(8), n, d);
            SubCache { ln, mod_out, attn: Some(cache), ffn_h: None, out }
        });

        let ffn_c = {
            let ln = layernorm_fwd(x, n, d);
            let mod_out = modulate_fwd(&ln.y, slot(9), slot(10), n, d);
            let h_pre = self.ffn1.forward(ps, &mod_out, n);
            let h = gelu_fwd(&h_pre);
            let out = self.ffn2.forward(ps, &h, n);
            gated_add(x, &out, slot(11), n, d);
            SubCache { ln, mod_out, attn: None, ffn_h: Some((h_pre, h)), out }
        };

        BlockCache { mods, self_c, ctx_c, audio_c, ffn_c }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        ps: &ParamSet,
        grads: &mut Grads,
        cache: &BlockCache,
        inputs: &BlockInputs<'_>,
        n: usize,
        dx_out: &[f64],
    ) -> BlockGrads {
        let d = self.dim;
        let mut dmods = vec![0.0; MOD_SLOTS * d];
        let mut dx = dx_out.to_vec();
        let mut dctx_kv = None;
        let mut daudio_kv = None;

        // Walk sublayers in reverse. Each one: gate -> sublayer -> modulate
        // -> layernorm, with the layernorm gradient joining the residual.
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut dalpha = vec![0.0; d];
        let finish = |dmods: &mut [f64],
                          base: usize,
                          c: &SubCache,
                          mods: &[f64],
                          dsub_in: &[f64],
                          dx: &mut [f64],
                          dg: &mut [f64],
                          db: &mut [f64]| {
            dg.iter_mut().for_each(|v| *v = 0.0);
            db.iter_mut().for_each(|v| *v = 0.0);
            let dln = modulate_bwd(&c.ln.y, &mods[base * d..(base + 1) * d], dsub_in, n, d, dg, db);
            dmods[base * d..(base + 1) * d].copy_from_slice(dg);
            dmods[(base + 1) * d..(base + 2) * d].copy_from_slice(db);
            let dxi = layernorm_bwd(&c.ln, &dln, n, d);
            for (a, b) in dx.iter_mut().zip(&dxi) {
                *a += b;
            }
        };

        // FFN (slots 9..12)
        {
            let c = &cache.ffn_c;
            let (h_pre, h) = c.ffn_h.as_ref().unwrap();
            dalpha.iter_mut().for_each(|v| *v = 0.0);
            let du = gate_bwd(&c.out, &cache.mods[11 * d..], &dx, n, d, &mut dalpha);
            dmods[11 * d..].copy_from_slice(&dalpha);
            let dh = self.ffn2.backward(ps, grads, h, &du, n);
            let dh_pre = gelu_bwd(h_pre, &dh);
            let dmod = self.ffn1.backward(ps, grads, &c.mod_out, &dh_pre, n);
            finish(&mut dmods, 9, c, &cache.mods, &dmod, &mut dx, &mut dgamma, &mut dbeta);
        }

        // Audio cross-attention (slots 6..9)
        if let (Some(c), Some((kvbuf, _, groups))) = (&cache.audio_c, inputs.audio_kv) {
            dalpha.iter_mut().for_each(|v| *v = 0.0);
            let du = gate_bwd(&c.out, &cache.mods[8 * d..9 * d], &dx, n, d, &mut dalpha);
            dmods[8 * d..9 * d].copy_from_slice(&dalpha);
            let (dxq, dkv) = self.audio_attn.backward(
                ps,
                grads,
                &c.mod_out,
                kvbuf,
                c.attn.as_ref().unwrap(),
                groups,
                &du,
            );
            daudio_kv = Some(dkv);
            finish(&mut dmods, 6, c, &cache.mods, &dxq, &mut dx, &mut dgamma, &mut dbeta);
        }

        // Context cross-attention (slots 3..6)
        if let (Some(c), Some((kvbuf, _, groups))) = (&cache.ctx_c, inputs.ctx_kv) {
            dalpha.iter_mut().for_each(|v| *v = 0.0);
            let du = gate_bwd(&c.out, &cache.mods[5 * d..6 * d], &dx, n, d, &mut dalpha);
            dmods[5 * d..6 * d].copy_from_slice(&dalpha);
            let (dxq, dkv) = self.ctx_attn.backward(
                ps,
                grads,
                &c.mod_out,
                kvbuf,
                c.attn.as_ref().unwrap(),
                groups,
                &du,
            );
            dctx_kv = Some(dkv);
            finish(&mut dmods, 3, c, &cache.mods, &dxq, &mut dx, &mut dgamma, &mut dbeta);
        }

        // Self-attention (slots 0..3)
        {
            let c = &cache.self_c;
            dalpha.iter_mut().for_each(|v| *v = 0.0);
            let du = gate_bwd(&c.out, &cache.mods[2 * d..3 * d], &dx, n, d, &mut dalpha);
            dmods[2 * d..3 * d].copy_from_slice(&dalpha);
            let (dxq, dxkv) = self.self_attn.backward(
                ps,
                grads,
                &c.mod_out,
                &c.mod_out,
                c.attn.as_ref().unwrap(),
                inputs.self_groups,
                &du,
            );
            let dsum: Vec<f64> = dxq.iter().zip(&dxkv).map(|(a, b)| a + b).collect();
            finish(&mut dmods, 0, c, &cache.mods, &dsum, &mut dx, &mut dgamma, &mut dbeta);
        }

        let dcond = self.adaln.backward(ps, grads, inputs.cond, &dmods, 1);
        BlockGrads { dx, dcond, dctx_kv, daudio_kv }
    }
}

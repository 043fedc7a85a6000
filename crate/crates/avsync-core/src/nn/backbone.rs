//! The audio-sync editing backbone: latent cells (with a mask channel)
//! become tokens, processed by conditioned transformer blocks with
//! frame-local self-attention, text cross-attention, and frame-windowed
//! audio cross-attention; the output head reads a velocity field back out.
//!
//! Self-attention is deliberately frame-local: audio cross-attention is the
//! only temporal channel, which makes the audio perturbation footprint
//! exactly `[f - w, f + w]` at every depth (a tested contract).

use super::attention::AttnGroup;
use super::block::{Block, BlockCache, BlockInputs};
use super::layers::{
    layernorm_bwd, layernorm_fwd, modulate_bwd, modulate_fwd, silu_bwd, silu_fwd, sinusoid,
    Linear, LnCache, Pe3d,
};
use super::params::{Grads, Init, ParamSet};
use super::ConditionBundle;
use crate::codec::{LatentGrid, LatentMask};
use crate::error::{CoreError, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;
use crate::world;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub text_vocab: usize,
    pub audio_bands: usize,
    pub max_tokens: usize,
    /// Audio window in frames: video frame f attends audio frames [f-w, f+w].
    pub audio_window: usize,
    /// Latent channel count per cell (patch^2 * C).
    pub latent_dim: usize,
    pub ffn_mult: usize,
}

impl Default for BackboneConfig {
    /// Desk config: trains in minutes on CPU while keeping every mechanism.
    fn default() -> Self {
        BackboneConfig {
            model_dim: 64,
            heads: 4,
            blocks: 4,
            text_vocab: world::vocab_size(),
            audio_bands: 16,
            max_tokens: 8192,
            audio_window: 1,
            latent_dim: 12,
            ffn_mult: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(CoreError::invalid("model_dim must be a positive multiple of heads"));
        }
        if self.blocks == 0 {
            return Err(CoreError::invalid("need at least one block"));
        }
        if self.text_vocab == 0 {
            return Err(CoreError::invalid("text vocabulary must be non-empty"));
        }
        if self.audio_bands == 0 || self.latent_dim == 0 || self.ffn_mult == 0 {
            return Err(CoreError::invalid("audio_bands, latent_dim, ffn_mult must be positive"));
        }
        Ok(())
    }
}

/// Frame-local self-attention groups; every frame may also see the reference
/// tokens, which only attend among themselves (so no cross-frame leaks).
pub fn self_attention_groups(t: usize, cells: usize, n_ref: usize) -> Vec<AttnGroup> {
    let mut groups: Vec<AttnGroup> = (0..t)
        .map(|f| AttnGroup {
            q: f * cells..(f + 1) * cells,
            kv: f * cells..(f + 1) * cells,
            kv_extra: (n_ref > 0).then_some(t * cells..t * cells + n_ref),
        })
        .collect();
    if n_ref > 0 {
        groups.push(AttnGroup::plain(t * cells..t * cells + n_ref, t * cells..t * cells + n_ref));
    }
    groups
}

/// Windowed audio attention: video tokens of frame f see audio rows
/// [f-w, f+w] clamped to the clip.
pub fn audio_attention_groups(t: usize, cells: usize, w: usize) -> Vec<AttnGroup> {
    (0..t)
        .map(|f| {
            AttnGroup::plain(f * cells..(f + 1) * cells, f.saturating_sub(w)..(f + w + 1).min(t))
        })
        .collect()
}

/// Frame-aligned cross-attention (refiner mask tokens onto video tokens).
pub fn frame_aligned_groups(t: usize, q_cells: usize, kv_cells: usize) -> Vec<AttnGroup> {
    (0..t)
        .map(|f| AttnGroup::plain(f * q_cells..(f + 1) * q_cells, f * kv_cells..(f + 1) * kv_cells))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    input_proj: Linear,
    text_embed: super::params::ParamId,
    audio_proj: Linear,
    t_mlp1: Linear,
    t_mlp2: Linear,
    blocks: Vec<Block>,
    /// Final-layer modulation (scale/shift from the conditioning vector).
    head_mod: Linear,
    head: Linear,
}

pub struct BackboneCache {
    token_in: Vec<f64>,
    n_video: usize,
    n_total: usize,
    t_sin: Vec<f64>,
    t_h_pre: Vec<f64>,
    t_h_act: Vec<f64>,
    cond: Vec<f64>,
    text_indices: Vec<usize>,
    text_kv: Vec<f64>,
    audio_feat: Option<Vec<f64>>,
    audio_kv: Option<Vec<f64>>,
    self_groups: Vec<AttnGroup>,
    text_groups: Vec<AttnGroup>,
    audio_groups: Vec<AttnGroup>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    head_mods: Vec<f64>,
    head_in: Vec<f64>,
    dims: (usize, usize, usize, usize),
}

impl Backbone {
    pub fn init(ps: &mut ParamSet, rng: &mut Stream, prefix: &str, cfg: &BackboneConfig) -> Result<Backbone> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Backbone {
            cfg: cfg.clone(),
            input_proj: Linear::init_default(ps, rng, &format!("{prefix}.input_proj"), cfg.latent_dim + 1, d),
            text_embed: ps.add(
                &format!("{prefix}.text_embed"),
                &[cfg.text_vocab, d],
                Init::Normal(0.02),
                rng,
            ),
            audio_proj: Linear::init_default(ps, rng, &format!("{prefix}.audio_proj"), cfg.audio_bands, d),
            t_mlp1: Linear::init_default(ps, rng, &format!("{prefix}.t_mlp1"), d, d),
            t_mlp2: Linear::init_default(ps, rng, &format!("{prefix}.t_mlp2"), d, d),
            blocks: (0..cfg.blocks)
                .map(|i| Block::init(ps, rng, &format!("{prefix}.blocks.{i}"), d, cfg.heads, cfg.ffn_mult))
                .collect(),
            head_mod: Linear::init(ps, rng, &format!("{prefix}.head_mod"), d, 2 * d, Init::Zeros),
            head: Linear::init_default(ps, rng, &format!("{prefix}.head"), d, cfg.latent_dim),
        })
    }

    /// Shared timestep conditioning: sinusoid -> linear -> SiLU -> linear.
    fn cond_forward(&self, ps: &ParamSet, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let t_sin = sinusoid(t * 1000.0, self.cfg.model_dim, 10_000.0);
        let h_pre = self.t_mlp1.forward(ps, &t_sin, 1);
        let h_act = silu_fwd(&h_pre);
        let cond = self.t_mlp2.forward(ps, &h_act, 1);
        (t_sin, h_pre, h_act, cond)
    }

    fn cond_backward(&self, ps: &ParamSet, grads: &mut Grads, cache: &BackboneCache, dcond: &[f64]) {
        let dh_act = self.t_mlp2.backward(ps, grads, &cache.t_h_act, dcond, 1);
        let dh_pre = silu_bwd(&cache.t_h_pre, &dh_act);
        let _ = self.t_mlp1.backward(ps, grads, &cache.t_sin, &dh_pre, 1);
    }

    pub fn forward(
        &self,
        ps: &ParamSet,
        z_t: &LatentGrid,
        t: f64,
        m_hat: &LatentMask,
        conds: &ConditionBundle,
    ) -> Result<(LatentGrid, BackboneCache)> {
        let cfg = &self.cfg;
        let d = cfg.model_dim;
        let (tf, h, w, dl) = z_t.dims();
        if dl != cfg.latent_dim {
            return Err(CoreError::invalid(format!(
                "latent dim {dl} does not match config {}",
                cfg.latent_dim
            )));
        }
        if m_hat.dims() != (tf, h, w) {
            return Err(CoreError::invalid("mask shape does not match latent"));
        }
        let cells = h * w;
        let n_video = tf * cells;
        let reference = conds.contexts.as_ref().and_then(|c| c.reference.as_ref());
        let n_ref = reference.map_or(0, |r| {
            let (_, rh, rw, _) = r.dims();
            rh * rw
        });
        let n_total = n_video + n_ref;
        if n_total > cfg.max_tokens {
            return Err(CoreError::invalid(format!(
                "{n_total} tokens exceed max_tokens {}",
                cfg.max_tokens
            )));
        }
        if let Some(r) = reference {
            let (rt, rh, rw, rdl) = r.dims();
            if rt != 1 || rh != h || rw != w || rdl != dl {
                return Err(CoreError::invalid("reference latent must be one frame of equal shape"));
            }
        }
        for ctx in conds.contexts.iter() {
            for grid in [ctx.scribble.as_ref(), ctx.pose.as_ref()].into_iter().flatten() {
                if grid.dims() != (tf, h, w, dl) {
                    return Err(CoreError::invalid("context latent shape must match the clip"));
                }
            }
        }

        // Token features: [latent (+ scribble + pose) || mask]
        let fdim = dl + 1;
        let mut token_in = vec![0.0; n_total * fdim];
        {
            let z = z_t.data.data();
            let m = m_hat.data.data();
            let scrib = conds.contexts.as_ref().and_then(|c| c.scribble.as_ref()).map(|g| g.data.data());
            let pose = conds.contexts.as_ref().and_then(|c| c.pose.as_ref()).map(|g| g.data.data());
            for cell in 0..n_video {
                let dst = &mut token_in[cell * fdim..cell * fdim + dl];
                dst.copy_from_slice(&z[cell * dl..(cell + 1) * dl]);
                if let Some(s) = scrib {
                    crate::tensor::axpy(dst, 1.0, &s[cell * dl..(cell + 1) * dl]);
                }
                if let Some(p) = pose {
                    crate::tensor::axpy(dst, 1.0, &p[cell * dl..(cell + 1) * dl]);
                }
                token_in[cell * fdim + dl] = m[cell];
            }
            if let Some(r) = reference {
                let rd = r.data.data();
                for cell in 0..n_ref {
                    let dst = &mut token_in[(n_video + cell) * fdim..(n_video + cell) * fdim + dl];
                    dst.copy_from_slice(&rd[cell * dl..(cell + 1) * dl]);
                }
            }
        }

        let mut x = self.input_proj.forward(ps, &token_in, n_total);
        let pe = Pe3d::new(tf, h, w, d);
        for f in 0..tf {
            for r in 0..h {
                for c in 0..w {
                    pe.add_to(&mut x[((f * h + r) * w + c) * d..((f * h + r) * w + c + 1) * d], f, r, c);
                }
            }
        }
        for cell in 0..n_ref {
            let (r, c) = (cell / w, cell % w);
            pe.add_to(&mut x[(n_video + cell) * d..(n_video + cell + 1) * d], tf, r, c);
        }

        let (t_sin, t_h_pre, t_h_act, cond) = self.cond_forward(ps, t);

        // Text tokens: plain embedding rows, no positional encoding.
        let text_indices = if conds.text.is_empty() { Vec::new() } else { conds.text.indices()? };
        let mut text_kv = vec![0.0; text_indices.len() * d];
        {
            let table = ps.get(self.text_embed).data();
            for (i, &idx) in text_indices.iter().enumerate() {
                if idx >= cfg.text_vocab {
                    return Err(CoreError::invalid(format!("text token {idx} outside vocabulary")));
                }
                text_kv[i * d..(i + 1) * d].copy_from_slice(&table[idx * d..(idx + 1) * d]);
            }
        }
        let text_groups = if text_indices.is_empty() {
            Vec::new()
        } else {
            vec![AttnGroup::plain(0..n_total, 0..text_indices.len())]
        };

        let (audio_feat, audio_kv) = match &conds.audio {
            Some(tokens) => {
                if tokens.frames() != tf || tokens.bands() != cfg.audio_bands {
                    return Err(CoreError::invalid(format!(
                        "audio tokens {}x{} do not match {tf} frames x {} bands",
                        tokens.frames(),
                        tokens.bands(),
                        cfg.audio_bands
                    )));
                }
                let feat = tokens.data.data().to_vec();
                let kv = self.audio_proj.forward(ps, &feat, tf);
                (Some(feat), Some(kv))
            }
            None => (None, None),
        };
        let audio_groups = if audio_kv.is_some() {
            audio_attention_groups(tf, cells, cfg.audio_window)
        } else {
            Vec::new()
        };
        let self_groups = self_attention_groups(tf, cells, n_ref);

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let inputs = BlockInputs {
                self_groups: &self_groups,
                ctx_kv: (!text_indices.is_empty()).then_some((
                    text_kv.as_slice(),
                    text_indices.len(),
                    text_groups.as_slice(),
                )),
                audio_kv: audio_kv
                    .as_ref()
                    .map(|kv| (kv.as_slice(), tf, audio_groups.as_slice())),
                cond: &cond,
            };
            block_caches.push(block.forward(ps, &mut x, n_total, &inputs));
            if x.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::numerical(format!("non-finite activations in block {i}")));
            }
        }

        let final_ln = layernorm_fwd(&x[..n_video * d], n_video, d);
        let head_mods = self.head_mod.forward(ps, &cond, 1);
        let head_in = modulate_fwd(&final_ln.y, &head_mods[..d], &head_mods[d..], n_video, d);
        let vel = self.head.forward(ps, &head_in, n_video);
        let velocity = LatentGrid {
            data: Tensor::from_vec(&[tf, h, w, dl], vel)?,
            patch: z_t.patch,
            origin: z_t.origin,
            fps: z_t.fps,
        };
        Ok((
            velocity,
            BackboneCache {
                token_in,
                n_video,
                n_total,
                t_sin,
                t_h_pre,
                t_h_act,
                cond,
                text_indices,
                text_kv,
                audio_feat,
                audio_kv,
                self_groups,
                text_groups,
                audio_groups,
                blocks: block_caches,
                final_ln,
                head_mods,
                head_in,
                dims: (tf, h, w, dl),
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        grads: &mut Grads,
        cache: &BackboneCache,
        d_velocity: &Tensor,
    ) -> Result<()> {
        let d = self.cfg.model_dim;
        let (tf, ..) = cache.dims;
        let n_video = cache.n_video;
        let n_total = cache.n_total;

        let d_head_in = self.head.backward(ps, grads, &cache.head_in, d_velocity.data(), n_video);
        let mut dhead_mods = vec![0.0; 2 * d];
        let (dg, db) = dhead_mods.split_at_mut(d);
        let d_ln_y = modulate_bwd(
            &cache.final_ln.y,
            &cache.head_mods[..d],
            &d_head_in,
            n_video,
            d,
            dg,
            db,
        );
        let mut dcond = self.head_mod.backward(ps, grads, &cache.cond, &dhead_mods, 1);
        let mut dx = layernorm_bwd(&cache.final_ln, &d_ln_y, n_video, d);
        dx.resize(n_total * d, 0.0);
        let mut dtext_kv = vec![0.0; cache.text_kv.len()];
        let mut daudio_kv = cache.audio_kv.as_ref().map(|kv| vec![0.0; kv.len()]);

        for (block, bcache) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            let inputs = BlockInputs {
                self_groups: &cache.self_groups,
                ctx_kv: (!cache.text_indices.is_empty()).then_some((
                    cache.text_kv.as_slice(),
                    cache.text_indices.len(),
                    cache.text_groups.as_slice(),
                )),
                audio_kv: cache
                    .audio_kv
                    .as_ref()
                    .map(|kv| (kv.as_slice(), tf, cache.audio_groups.as_slice())),
                cond: &cache.cond,
            };
            let bg = block.backward(ps, grads, bcache, &inputs, n_total, &dx);
            dx = bg.dx;
            for (a, b) in dcond.iter_mut().zip(&bg.dcond) {
                *a += b;
            }
            if let Some(dkv) = bg.dctx_kv {
                for (a, b) in dtext_kv.iter_mut().zip(&dkv) {
                    *a += b;
                }
            }
            if let (Some(acc), Some(dkv)) = (daudio_kv.as_mut(), bg.daudio_kv) {
                for (a, b) in acc.iter_mut().zip(&dkv) {
                    *a += b;
                }
            }
        }

        // text embedding rows
        if !cache.text_indices.is_empty() {
            let table_grad = grads.get_mut(self.text_embed).data_mut();
            for (i, &idx) in cache.text_indices.iter().enumerate() {
                crate::tensor::axpy(
                    &mut table_grad[idx * d..(idx + 1) * d],
                    1.0,
                    &dtext_kv[i * d..(i + 1) * d],
                );
            }
        }
        if let (Some(feat), Some(dkv)) = (&cache.audio_feat, &daudio_kv) {
            let _ = self.audio_proj.backward(ps, grads, feat, dkv, tf);
        }
        self.cond_backward(ps, grads, cache, &dcond);
        let _ = self.input_proj.backward(ps, grads, &cache.token_in, &dx, n_total);
        Ok(())
    }

    /// Forward without keeping the cache.
    pub fn velocity(
        &self,
        ps: &ParamSet,
        z_t: &LatentGrid,
        t: f64,
        m_hat: &LatentMask,
        conds: &ConditionBundle,
    ) -> Result<LatentGrid> {
        Ok(self.forward(ps, z_t, t, m_hat, conds)?.0)
    }
}

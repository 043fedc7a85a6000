//! Precision-conditioned mask refiner: the same block layout as the
//! backbone, but mask cells are the tokens, cross-attention keys/values come
//! from the current video latents instead of text, and the precision factor
//! is linearly encoded into the modulation conditioning alongside the
//! timestep. One forward per sampler step predicts a soft mask in (0, 1).

use super::attention::AttnGroup;
use super::backbone::{audio_attention_groups, frame_aligned_groups, self_attention_groups};
use super::block::{Block, BlockCache, BlockInputs};
use super::layers::{
    layernorm_bwd, layernorm_fwd, modulate_bwd, modulate_fwd, sigmoid, silu_bwd, silu_fwd,
    sinusoid, Linear, LnCache, Pe3d,
};
use super::params::{Grads, ParamSet};
use super::ConditionBundle;
use crate::codec::{LatentGrid, LatentMask};
use crate::error::{CoreError, Result};
use crate::refiner::PRECISION_MAX;
use crate::rng::Stream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub audio_bands: usize,
    pub audio_window: usize,
    pub latent_dim: usize,
    pub ffn_mult: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            model_dim: 64,
            heads: 4,
            blocks: 4,
            audio_bands: 16,
            audio_window: 1,
            latent_dim: 12,
            ffn_mult: 4,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(CoreError::invalid("model_dim must be a positive multiple of heads"));
        }
        if self.blocks == 0 || self.audio_bands == 0 || self.latent_dim == 0 || self.ffn_mult == 0 {
            return Err(CoreError::invalid("refiner config fields must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RefinerNet {
    pub cfg: RefinerConfig,
    input_proj: Linear,
    video_proj: Linear,
    audio_proj: Linear,
    t_mlp1: Linear,
    t_mlp2: Linear,
    /// The precision-factor encoder; zeroing its weights makes the net
    /// p-invariant (the "without precision factor" ablation hook).
    p_proj: Linear,
    blocks: Vec<Block>,
    head_mod: Linear,
    head: Linear,
}

pub struct RefinerCache {
    mask_in: Vec<f64>,
    video_in: Vec<f64>,
    video_kv: Vec<f64>,
    audio_feat: Option<Vec<f64>>,
    audio_kv: Option<Vec<f64>>,
    t_sin: Vec<f64>,
    t_h_pre: Vec<f64>,
    t_h_act: Vec<f64>,
    p_in: Vec<f64>,
    cond: Vec<f64>,
    self_groups: Vec<AttnGroup>,
    video_groups: Vec<AttnGroup>,
    audio_groups: Vec<AttnGroup>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    head_mods: Vec<f64>,
    head_in: Vec<f64>,
    /// Sigmoid outputs (the prediction), kept for the logistic backward.
    probs: Vec<f64>,
    dims: (usize, usize, usize),
}

impl RefinerNet {
    pub fn init(ps: &mut ParamSet, rng: &mut Stream, prefix: &str, cfg: &RefinerConfig) -> Result<RefinerNet> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(RefinerNet {
            cfg: cfg.clone(),
            input_proj: Linear::init_default(ps, rng, &format!("{prefix}.input_proj"), 1, d),
            video_proj: Linear::init_default(ps, rng, &format!("{prefix}.video_proj"), cfg.latent_dim, d),
            audio_proj: Linear::init_default(ps, rng, &format!("{prefix}.audio_proj"), cfg.audio_bands, d),
            t_mlp1: Linear::init_default(ps, rng, &format!("{prefix}.t_mlp1"), d, d),
            t_mlp2: Linear::init_default(ps, rng, &format!("{prefix}.t_mlp2"), d, d),
            p_proj: Linear::init(
                ps,
                rng,
                &format!("{prefix}.p_proj"),
                1,
                d,
                super::params::Init::Normal(0.1),
            ),
            blocks: (0..cfg.blocks)
                .map(|i| Block::init(ps, rng, &format!("{prefix}.blocks.{i}"), d, cfg.heads, cfg.ffn_mult))
                .collect(),
            head_mod: Linear::init(
                ps,
                rng,
                &format!("{prefix}.head_mod"),
                d,
                2 * d,
                super::params::Init::Zeros,
            ),
            head: Linear::init_default(ps, rng, &format!("{prefix}.head"), d, 1),
        })
    }

    pub fn forward(
        &self,
        ps: &ParamSet,
        m_in: &LatentMask,
        p: f64,
        t: f64,
        video: &LatentGrid,
        conds: &ConditionBundle,
    ) -> Result<(LatentMask, RefinerCache)> {
        let cfg = &self.cfg;
        let d = cfg.model_dim;
        if !(0.0..=PRECISION_MAX).contains(&p) {
            return Err(CoreError::invalid(format!("precision factor {p} outside [0, {PRECISION_MAX}]")));
        }
        let (tf, h, w, dl) = video.dims();
        if dl != cfg.latent_dim {
            return Err(CoreError::invalid("video latent dim does not match refiner config"));
        }
        if m_in.dims() != (tf, h, w) {
            return Err(CoreError::invalid("mask shape does not match video latent"));
        }
        let cells = h * w;
        let n = tf * cells;

        let mask_in: Vec<f64> = m_in.data.data().to_vec();
        let mut x = self.input_proj.forward(ps, &mask_in, n);
        let pe = Pe3d::new(tf, h, w, d);
        let add_pe = |buf: &mut [f64]| {
            for f in 0..tf {
                for r in 0..h {
                    for c in 0..w {
                        let i = (f * h + r) * w + c;
                        pe.add_to(&mut buf[i * d..(i + 1) * d], f, r, c);
                    }
                }
            }
        };
        add_pe(&mut x);

        let video_in = video.data.data().to_vec();
        let mut video_kv = self.video_proj.forward(ps, &video_in, n);
        add_pe(&mut video_kv);

        let (audio_feat, audio_kv) = match &conds.audio {
            Some(tokens) => {
                if tokens.frames() != tf || tokens.bands() != cfg.audio_bands {
                    return Err(CoreError::invalid("audio tokens do not match refiner config"));
                }
                let feat = tokens.data.data().to_vec();
                let kv = self.audio_proj.forward(ps, &feat, tf);
                (Some(feat), Some(kv))
            }
            None => (None, None),
        };

        let t_sin = sinusoid(t * 1000.0, d, 10_000.0);
        let t_h_pre = self.t_mlp1.forward(ps, &t_sin, 1);
        let t_h_act = silu_fwd(&t_h_pre);
        let t_cond = self.t_mlp2.forward(ps, &t_h_act, 1);
        let p_in = vec![p];
        let p_cond = self.p_proj.forward(ps, &p_in, 1);
        let cond: Vec<f64> = t_cond.iter().zip(&p_cond).map(|(a, b)| a + b).collect();

        let self_groups = self_attention_groups(tf, cells, 0);
        let video_groups = frame_aligned_groups(tf, cells, cells);
        let audio_groups = if audio_kv.is_some() {
            audio_attention_groups(tf, cells, cfg.audio_window)
        } else {
            Vec::new()
        };

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let inputs = BlockInputs {
                self_groups: &self_groups,
                ctx_kv: Some((video_kv.as_slice(), n, video_groups.as_slice())),
                audio_kv: audio_kv.as_ref().map(|kv| (kv.as_slice(), tf, audio_groups.as_slice())),
                cond: &cond,
            };
            block_caches.push(block.forward(ps, &mut x, n, &inputs));
            if x.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::numerical(format!("non-finite activations in refiner block {i}")));
            }
        }

        let final_ln = layernorm_fwd(&x, n, d);
        let head_mods = self.head_mod.forward(ps, &cond, 1);
        let head_in = modulate_fwd(&final_ln.y, &head_mods[..d], &head_mods[d..], n, d);
        let logits = self.head.forward(ps, &head_in, n);
        let probs: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
        let out = LatentMask { data: Tensor::from_vec(&[tf, h, w], probs.clone())? };
        Ok((
            out,
            RefinerCache {
                mask_in,
                video_in,
                video_kv,
                audio_feat,
                audio_kv,
                t_sin,
                t_h_pre,
                t_h_act,
                p_in,
                cond,
                self_groups,
                video_groups,
                audio_groups,
                blocks: block_caches,
                final_ln,
                head_mods,
                head_in,
                probs,
                dims: (tf, h, w),
            },
        ))
    }

    /// Backward from the gradient on the sigmoid output.
    pub fn backward(
        &self,
        ps: &ParamSet,
        grads: &mut Grads,
        cache: &RefinerCache,
        d_probs: &Tensor,
    ) -> Result<()> {
        let d = self.cfg.model_dim;
        let (tf, h, w) = cache.dims;
        let n = tf * h * w;

        let dlogits: Vec<f64> = d_probs
            .data()
            .iter()
            .zip(&cache.probs)
            .map(|(&g, &s)| g * s * (1.0 - s))
            .collect();
        let d_head_in = self.head.backward(ps, grads, &cache.head_in, &dlogits, n);
        let mut dhead_mods = vec![0.0; 2 * d];
        let (dg, db) = dhead_mods.split_at_mut(d);
        let d_ln_y =
            modulate_bwd(&cache.final_ln.y, &cache.head_mods[..d], &d_head_in, n, d, dg, db);
        let mut dcond = self.head_mod.backward(ps, grads, &cache.cond, &dhead_mods, 1);
        let mut dx = layernorm_bwd(&cache.final_ln, &d_ln_y, n, d);
        let mut dvideo_kv = vec![0.0; cache.video_kv.len()];
        let mut daudio_kv = cache.audio_kv.as_ref().map(|kv| vec![0.0; kv.len()]);

        for (block, bcache) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            let inputs = BlockInputs {
                self_groups: &cache.self_groups,
                ctx_kv: Some((cache.video_kv.as_slice(), n, cache.video_groups.as_slice())),
                audio_kv: cache
                    .audio_kv
                    .as_ref()
                    .map(|kv| (kv.as_slice(), tf, cache.audio_groups.as_slice())),
                cond: &cache.cond,
            };
            let bg = block.backward(ps, grads, bcache, &inputs, n, &dx);
            dx = bg.dx;
            for (a, b) in dcond.iter_mut().zip(&bg.dcond) {
                *a += b;
            }
            if let Some(dkv) = bg.dctx_kv {
                for (a, b) in dvideo_kv.iter_mut().zip(&dkv) {
                    *a += b;
                }
            }
            if let (Some(acc), Some(dkv)) = (daudio_kv.as_mut(), bg.daudio_kv) {
                for (a, b) in acc.iter_mut().zip(&dkv) {
                    *a += b;
                }
            }
        }

        let _ = self.video_proj.backward(ps, grads, &cache.video_in, &dvideo_kv, n);
        if let (Some(feat), Some(dkv)) = (&cache.audio_feat, &daudio_kv) {
            let _ = self.audio_proj.backward(ps, grads, feat, dkv, tf);
        }
        // cond = t_mlp2(silu(t_mlp1(t_sin))) + p_proj(p): both branches get dcond
        let dh_act = self.t_mlp2.backward(ps, grads, &cache.t_h_act, &dcond, 1);
        let dh_pre = silu_bwd(&cache.t_h_pre, &dh_act);
        let _ = self.t_mlp1.backward(ps, grads, &cache.t_sin, &dh_pre, 1);
        let _ = self.p_proj.backward(ps, grads, &cache.p_in, &dcond, 1);
        let _ = self.input_proj.backward(ps, grads, &cache.mask_in, &dx, n);
        Ok(())
    }

    /// Zero the precision-factor encoder in place (ablation hook).
    pub fn zero_p_encoder(&self, ps: &mut ParamSet) {
        ps.get_mut(self.p_proj.w).fill(0.0);
        ps.get_mut(self.p_proj.b).fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AudioTokens;
    use crate::refiner::FocalParams;

    fn tiny_cfg() -> RefinerConfig {
        RefinerConfig {
            model_dim: 16,
            heads: 2,
            blocks: 2,
            audio_bands: 4,
            latent_dim: 3,
            ffn_mult: 2,
            ..RefinerConfig::default()
        }
    }

    fn setup(seed: u64) -> (ParamSet, RefinerNet) {
        let mut rng = Stream::new(seed, 0);
        let mut ps = ParamSet::new();
        let net = RefinerNet::init(&mut ps, &mut rng, "refiner", &tiny_cfg()).unwrap();
        (ps, net)
    }

    fn jitter(ps: &mut ParamSet, seed: u64) {
        let mut rng = Stream::new(seed, 99);
        for i in 0..ps.len() {
            for v in ps.get_mut(super::super::params::ParamId(i)).data_mut() {
                *v += rng.normal() * 0.05;
            }
        }
    }

    fn video(tf: usize, h: usize, w: usize, seed: u64) -> LatentGrid {
        let mut rng = Stream::new(seed, 1);
        LatentGrid {
            data: Tensor::from_vec(&[tf, h, w, 3], (0..tf * h * w * 3).map(|_| rng.normal()).collect())
                .unwrap(),
            patch: 2,
            origin: (tf, h * 2, w * 2, 3),
            fps: 8,
        }
    }

    fn conds(tf: usize, bands: usize, seed: u64) -> ConditionBundle {
        let mut rng = Stream::new(seed, 2);
        ConditionBundle {
            text: crate::world::Descriptor::empty(),
            audio: Some(AudioTokens {
                data: Tensor::from_vec(&[tf, bands], (0..tf * bands).map(|_| rng.uniform()).collect())
                    .unwrap(),
            }),
            contexts: None,
            unmasked_frames: vec![],
        }
    }

    #[test]
    fn output_is_a_soft_mask_of_matching_shape() {
        let (ps, net) = setup(1);
        let v = video(2, 3, 3, 3);
        let m = LatentMask::ones(2, 3, 3);
        let (out, _) = net.forward(&ps, &m, 10.0, 0.1, &v, &conds(2, 4, 4)).unwrap();
        assert_eq!(out.dims(), (2, 3, 3));
        assert!(out.data.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn deterministic_given_inputs_and_params() {
        let (ps, net) = setup(2);
        let v = video(2, 3, 3, 5);
        let m = LatentMask::ones(2, 3, 3);
        let c = conds(2, 4, 6);
        let (a, _) = net.forward(&ps, &m, 4.0, 0.5, &v, &c).unwrap();
        let (b, _) = net.forward(&ps, &m, 4.0, 0.5, &v, &c).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn p_changes_output_until_encoder_is_zeroed() {
        let (mut ps, net) = setup(3);
        jitter(&mut ps, 4);
        let v = video(2, 3, 3, 7);
        let m = LatentMask::ones(2, 3, 3);
        let c = conds(2, 4, 8);
        let (lo, _) = net.forward(&ps, &m, 0.0, 0.5, &v, &c).unwrap();
        let (hi, _) = net.forward(&ps, &m, 10.0, 0.5, &v, &c).unwrap();
        let diff = lo
            .data
            .data()
            .iter()
            .zip(hi.data.data())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        assert!(diff > 1e-9, "precision factor must influence the output");

        net.zero_p_encoder(&mut ps);
        let (lo2, _) = net.forward(&ps, &m, 0.0, 0.5, &v, &c).unwrap();
        let (hi2, _) = net.forward(&ps, &m, 10.0, 0.5, &v, &c).unwrap();
        assert_eq!(lo2.data, hi2.data, "zeroed p-encoder must be p-invariant");
    }

    #[test]
    fn out_of_range_p_is_rejected() {
        let (ps, net) = setup(5);
        let v = video(1, 2, 2, 9);
        let m = LatentMask::ones(1, 2, 2);
        assert!(net.forward(&ps, &m, 11.0, 0.5, &v, &conds(1, 4, 10)).is_err());
    }

    #[test]
    fn refiner_gradients_match_finite_differences() {
        let (mut ps, net) = setup(6);
        jitter(&mut ps, 7);
        let (tf, h, w) = (2, 2, 2);
        let v = video(tf, h, w, 11);
        let mut m = LatentMask::zeros(tf, h, w);
        for (i, x) in m.data.data_mut().iter_mut().enumerate() {
            *x = (i % 3 == 0) as usize as f64;
        }
        let target = LatentMask {
            data: Tensor::from_vec(&[tf, h, w], (0..tf * h * w).map(|i| (i % 2) as f64).collect())
                .unwrap(),
        };
        let c = conds(tf, 4, 12);
        let fp = FocalParams::default();

        let loss = |ps: &ParamSet| {
            let (out, _) = net.forward(ps, &m, 3.0, 0.4, &v, &c).unwrap();
            crate::refiner::focal_loss(&out, &target, fp).unwrap()
        };

        let (out, cache) = net.forward(&ps, &m, 3.0, 0.4, &v, &c).unwrap();
        let (_, dprobs) = crate::refiner::focal_loss_grad(&out, &target, fp).unwrap();
        let mut grads = Grads::zeros_like(&ps);
        net.backward(&ps, &mut grads, &cache, &dprobs).unwrap();

        let h_step = 1e-4;
        let mut rng = Stream::new(13, 0);
        for pick in 0..8 {
            let pid = super::super::params::ParamId(rng.index(ps.len()));
            let i = rng.index(ps.get(pid).len());
            let mut ps2 = ps.clone();
            ps2.get_mut(pid).data_mut()[i] += h_step;
            let up = loss(&ps2);
            ps2.get_mut(pid).data_mut()[i] -= 2.0 * h_step;
            let dn = loss(&ps2);
            let fd = (up - dn) / (2.0 * h_step);
            let got = grads.get(pid).data()[i];
            let denom = got.abs().max(fd.abs());
            if denom < 1e-10 {
                continue;
            }
            let rel = (got - fd).abs() / denom;
            assert!(rel < 1e-3, "pick {pick} param {} [{i}]: {got} vs {fd}", ps.name(pid));
        }
    }
}

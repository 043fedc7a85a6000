//! Desk-computable evaluation metrics: mask IoU, frame consistency,
//! background-preservation error, and the audio-visual sync proxy.
//! Pretrained-network metrics are declared unavailable by the report schema.

use crate::codec::{downsample_mask, upsample_mask, LatentMask};
use crate::error::{CoreError, Result};
use crate::media::{AudioTrack, InstanceMask, VideoClip};
use crate::rng::Stream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn iou_raw(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CoreError::invalid(format!(
            "iou shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        // empty vs empty: identical masks
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Intersection over union of two pixel masks, jointly over all frames.
pub fn iou(a: &InstanceMask, b: &InstanceMask) -> Result<f64> {
    iou_raw(&a.data, &b.data)
}

/// IoU at latent resolution (values binarized at 0.5).
pub fn iou_latent(a: &LatentMask, b: &LatentMask) -> Result<f64> {
    iou_raw(&a.data, &b.data)
}

// ---------------------------------------------------------------------------
// Frame consistency
// ---------------------------------------------------------------------------

/// Maps a frame to an embedding vector.
pub trait FrameEmbedder {
    fn embed(&self, frame: &[f64], h: usize, w: usize, c: usize) -> Vec<f64>;
}

/// Desk default embedder: mean-pool each channel onto a `grid x grid` layout,
/// flatten, and subtract the embedding mean (so a frame and its negation are
/// antipodal).
#[derive(Debug, Clone, Copy)]
pub struct MeanPoolEmbedder {
    pub grid: usize,
}

impl Default for MeanPoolEmbedder {
    fn default() -> Self {
        MeanPoolEmbedder { grid: 8 }
    }
}

impl FrameEmbedder for MeanPoolEmbedder {
    fn embed(&self, frame: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
        let g = self.grid.min(h).min(w);
        let mut out = vec![0.0; g * g * c];
        for br in 0..g {
            let (r0, r1) = (br * h / g, ((br + 1) * h / g).max(br * h / g + 1));
            for bc in 0..g {
                let (c0, c1) = (bc * w / g, ((bc + 1) * w / g).max(bc * w / g + 1));
                let n = ((r1 - r0) * (c1 - c0)) as f64;
                for ch in 0..c {
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            acc += frame[(r * w + cc) * c + ch];
                        }
                    }
                    out[(br * g + bc) * c + ch] = acc / n;
                }
            }
        }
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut().for_each(|x| *x -= mean);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameConsistency {
    pub mean_cosine: f64,
    /// Consecutive pairs skipped because an embedding had zero norm.
    pub skipped_pairs: usize,
}

/// Mean cosine similarity between embeddings of consecutive frames.
pub fn frame_consistency(video: &VideoClip, embedder: &dyn FrameEmbedder) -> Result<FrameConsistency> {
    let (t, h, w, c) = video.dims();
    if t < 2 {
        return Err(CoreError::invalid("frame consistency needs at least 2 frames"));
    }
    let embeds: Vec<Vec<f64>> = (0..t).map(|f| embedder.embed(video.frame(f), h, w, c)).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    let mut skipped = 0usize;
    for f in 0..t - 1 {
        let (a, b) = (&embeds[f], &embeds[f + 1]);
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            skipped += 1;
            continue;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        sum += dot / (na * nb);
        pairs += 1;
    }
    let mean_cosine = if pairs == 0 { 0.0 } else { sum / pairs as f64 };
    Ok(FrameConsistency { mean_cosine, skipped_pairs: skipped })
}

// ---------------------------------------------------------------------------
// Background preservation
// ---------------------------------------------------------------------------

/// Max abs pixel difference outside the patch-aligned dilation of `mask`
/// (`upsample(downsample(mask))`), i.e. outside everything the sampler was
/// allowed to touch.
pub fn background_error(
    edited: &VideoClip,
    original: &VideoClip,
    mask: &InstanceMask,
    patch: usize,
) -> Result<f64> {
    if edited.dims() != original.dims() {
        return Err(CoreError::invalid("background_error wants equal video shapes"));
    }
    let (t, h, w, c) = edited.dims();
    let region = upsample_mask(&downsample_mask(&mask.binarized_pixels(), patch)?, patch);
    let mut err = 0.0f64;
    for f in 0..t {
        let (ef, of, mf) = (edited.frame(f), original.frame(f), region.frame(f));
        for r in 0..h {
            for cc in 0..w {
                if mf[r * w + cc] == 0.0 {
                    for ch in 0..c {
                        let i = (r * w + cc) * c + ch;
                        err = err.max((ef[i] - of[i]).abs());
                    }
                }
            }
        }
    }
    Ok(err)
}

impl InstanceMask {
    /// 0/1 copy thresholded at 0.5 (soft masks round to occupancy).
    pub fn binarized_pixels(&self) -> InstanceMask {
        InstanceMask { data: self.data.map(|x| if x > 0.5 { 1.0 } else { 0.0 }) }
    }
}

// ---------------------------------------------------------------------------
// Sync proxy
// ---------------------------------------------------------------------------

/// Per-frame RMS envelope of an audio track cut into `t` equal windows.
pub fn rms_envelope(audio: &AudioTrack, t: usize) -> Vec<f64> {
    let n = audio.samples.len() / t;
    (0..t)
        .map(|f| {
            let win = &audio.samples[f * n..(f + 1) * n];
            (win.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt()
        })
        .collect()
}

/// Per-frame masked motion energy: mean |frame_{f+1} - frame_f| over pixels
/// inside the union of the two frames' masks.
pub fn masked_motion_energy(video: &VideoClip, mask: &InstanceMask) -> Vec<f64> {
    let (t, h, w, c) = video.dims();
    (0..t.saturating_sub(1))
        .map(|f| {
            let (a, b) = (video.frame(f), video.frame(f + 1));
            let (ma, mb) = (mask.frame(f), mask.frame(f + 1));
            let mut acc = 0.0;
            let mut n = 0usize;
            for p in 0..h * w {
                if ma[p] > 0.5 || mb[p] > 0.5 {
                    for ch in 0..c {
                        acc += (b[p * c + ch] - a[p * c + ch]).abs();
                    }
                    n += c;
                }
            }
            if n == 0 {
                0.0
            } else {
                acc / n as f64
            }
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        cov += x * y;
        va += x * x;
        vb += y * y;
    }
    if va < 1e-18 || vb < 1e-18 {
        // constant series: 0 by convention
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Pearson correlation between masked motion energy and the audio RMS
/// envelope; the desk stand-in for pretrained sync metrics. Constant series
/// give 0 by convention.
pub fn sync_proxy(video: &VideoClip, audio: &AudioTrack, mask: &InstanceMask) -> Result<f64> {
    let (t, _, _, _) = video.dims();
    let video_secs = video.seconds();
    let audio_secs = audio.seconds();
    if (video_secs - audio_secs).abs() > 1e-9 {
        return Err(CoreError::invalid(format!(
            "duration mismatch: video {video_secs}s vs audio {audio_secs}s"
        )));
    }
    let motion = masked_motion_energy(video, mask);
    let rms = rms_envelope(audio, t);
    Ok(pearson(&motion, &rms[..t - 1]))
}

/// Permute whole audio frames; the baseline that sync_proxy is compared
/// against.
pub fn frame_shuffled_audio(audio: &AudioTrack, t: usize, rng: &mut Stream) -> AudioTrack {
    let n = audio.samples.len() / t;
    let mut order: Vec<usize> = (0..t).collect();
    rng.shuffle(&mut order);
    let mut samples = Vec::with_capacity(audio.samples.len());
    for &f in &order {
        samples.extend_from_slice(&audio.samples[f * n..(f + 1) * n]);
    }
    samples.extend_from_slice(&audio.samples[t * n..]);
    AudioTrack { samples, sample_rate: audio.sample_rate }
}

// ---------------------------------------------------------------------------
// Report schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub id: String,
    pub iou: Option<f64>,
    pub fc: Option<f64>,
    pub bg_err: Option<f64>,
    pub sync_proxy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

fn aggregate(values: impl Iterator<Item = f64>) -> Aggregate {
    let vs: Vec<f64> = values.collect();
    if vs.is_empty() {
        return Aggregate::default();
    }
    let mean = vs.iter().sum::<f64>() / vs.len() as f64;
    let var = vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vs.len() as f64;
    Aggregate { mean, stddev: var.sqrt(), count: vs.len() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clips: Vec<ClipMetrics>,
    pub aggregates: BTreeMap<String, Aggregate>,
    /// Metrics that need pretrained networks, with the reason they are null.
    pub unavailable: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn from_clips(clips: Vec<ClipMetrics>) -> Result<Self> {
        if clips.is_empty() {
            return Err(CoreError::invalid("report needs at least one clip"));
        }
        for c in &clips {
            for v in [c.iou, c.fc, c.bg_err, c.sync_proxy].into_iter().flatten() {
                if !v.is_finite() {
                    return Err(CoreError::numerical(format!("clip {}: non-finite metric", c.id)));
                }
            }
        }
        let mut aggregates = BTreeMap::new();
        aggregates.insert("iou".into(), aggregate(clips.iter().filter_map(|c| c.iou)));
        aggregates.insert("fc".into(), aggregate(clips.iter().filter_map(|c| c.fc)));
        aggregates.insert("bg_err".into(), aggregate(clips.iter().filter_map(|c| c.bg_err)));
        aggregates
            .insert("sync_proxy".into(), aggregate(clips.iter().filter_map(|c| c.sync_proxy)));
        let mut unavailable = BTreeMap::new();
        for (k, why) in [
            ("fvd", "needs a pretrained video feature network"),
            ("is", "needs a pretrained image classifier"),
            ("tc", "needs a pretrained video-text embedder"),
            ("ac", "needs a pretrained audio-video embedder"),
            ("sync_c", "needs a pretrained lip-sync network"),
            ("sync_d", "needs a pretrained lip-sync network"),
        ] {
            unavailable.insert(k.to_string(), why.to_string());
        }
        Ok(MetricReport { clips, aggregates, unavailable })
    }
}

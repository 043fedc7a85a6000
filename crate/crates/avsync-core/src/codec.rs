//! Invertible patch codec standing in for a learned VAE.
//!
//! Each `s x s x C` pixel patch maps through a fixed orthonormal basis
//! (2-D Haar over space, Helmert over channels) to a `d = s^2 * C` token.
//! Encoding is linear and exactly invertible; masks downsample by max-pool
//! so the editable region never shrinks, and upsample by nearest neighbour.

use crate::error::{CoreError, Result};
use crate::media::{InstanceMask, VideoClip};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// `[T, h, w, d]` latent tokens plus enough provenance to decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub data: Tensor,
    pub patch: usize,
    /// (T, H, W, C) of the source clip.
    pub origin: (usize, usize, usize, usize),
    pub fps: u32,
}

impl LatentGrid {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn zeros_like(other: &LatentGrid) -> LatentGrid {
        LatentGrid {
            data: Tensor::zeros(other.data.shape()),
            patch: other.patch,
            origin: other.origin,
            fps: other.fps,
        }
    }
}

/// `[T, h, w]` mask at latent resolution; binary from the downsampler, soft
/// in `[0, 1]` when produced by the refiner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMask {
    pub data: Tensor,
}

impl LatentMask {
    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        LatentMask { data: Tensor::zeros(&[t, h, w]) }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn ones(t: usize, h: usize, w: usize) -> Self {
        LatentMask { data: Tensor::filled(&[t, h, w], 1.0) }
    }

    /// Hard 0/1 copy at `thresh`.
    pub fn binarized(&self, thresh: f64) -> LatentMask {
        LatentMask { data: self.data.map(|x| if x >= thresh { 1.0 } else { 0.0 }) }
    }

    /// Force the mask to zero on the given frames (long-video conditioning).
    pub fn zero_frames(&mut self, frames: &[usize]) {
        let (_, h, w) = self.dims();
        for &f in frames {
            let off = f * h * w;
            self.data.data_mut()[off..off + h * w].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Orthonormal 1-D Haar matrix; `n` must be a power of two.
fn haar_matrix(n: usize) -> Vec<f64> {
    assert!(n.is_power_of_two());
    if n == 1 {
        return vec![1.0];
    }
    let half = haar_matrix(n / 2);
    let m = n / 2;
    let mut out = vec![0.0; n * n];
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..m {
        for j in 0..m {
            let v = half[i * m + j] * r;
            out[i * n + 2 * j] = v;
            out[i * n + 2 * j + 1] = v;
        }
    }
    for i in 0..m {
        out[(m + i) * n + 2 * i] = r;
        out[(m + i) * n + 2 * i + 1] = -r;
    }
    out
}

/// Orthonormal Helmert matrix of size `n`; first row is the constant vector.
fn helmert_matrix(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let c = 1.0 / (n as f64).sqrt();
    for j in 0..n {
        out[j] = c;
    }
    for k in 1..n {
        let norm = 1.0 / ((k * (k + 1)) as f64).sqrt();
        for j in 0..k {
            out[k * n + j] = norm;
        }
        out[k * n + k] = -(k as f64) * norm;
    }
    out
}

#[derive(Debug, Clone)]
pub struct PatchCodec {
    patch: usize,
    channels: usize,
    /// `d x d` orthonormal basis; row i is the i-th analysis vector over the
    /// flattened patch (pixel-major, channel-minor).
    basis: Vec<f64>,
}

/// Default spatial patch size.
pub const DEFAULT_PATCH: usize = 2;

impl PatchCodec {
    pub fn new(patch: usize, channels: usize) -> Result<Self> {
        if patch == 0 || !patch.is_power_of_two() {
            return Err(CoreError::invalid(format!(
                "patch size {patch} must be a power of two"
            )));
        }
        let sq = patch * patch;
        let d = sq * channels;
        let spatial2d = {
            // kron(haar, haar) over (dy, dx)
            let h1 = haar_matrix(patch);
            let mut s2 = vec![0.0; sq * sq];
            for iy in 0..patch {
                for ix in 0..patch {
                    for jy in 0..patch {
                        for jx in 0..patch {
                            s2[(iy * patch + ix) * sq + (jy * patch + jx)] =
                                h1[iy * patch + jy] * h1[ix * patch + jx];
                        }
                    }
                }
            }
            s2
        };
        let chan = helmert_matrix(channels);
        let mut basis = vec![0.0; d * d];
        for is in 0..sq {
            for ic in 0..channels {
                for js in 0..sq {
                    for jc in 0..channels {
                        basis[(is * channels + ic) * d + (js * channels + jc)] =
                            spatial2d[is * sq + js] * chan[ic * channels + jc];
                    }
                }
            }
        }
        Ok(PatchCodec { patch, channels, basis })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn latent_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// The basis matrix (row-major `d x d`); exposed for orthonormality tests.
    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn encode(&self, video: &VideoClip) -> Result<LatentGrid> {
        let (t, hh, ww, c) = video.dims();
        let s = self.patch;
        if c != self.channels {
            return Err(CoreError::invalid(format!(
                "codec built for {} channels, video has {c}",
                self.channels
            )));
        }
        if hh % s != 0 || ww % s != 0 {
            return Err(CoreError::invalid(format!(
                "video {hh}x{ww} not divisible by patch size {s}"
            )));
        }
        let (h, w) = (hh / s, ww / s);
        let d = self.latent_dim();
        let mut out = Tensor::zeros(&[t, h, w, d]);
        let mut patchvec = vec![0.0; d];
        let src = video.data.data();
        let dst = out.data_mut();
        for f in 0..t {
            for r in 0..h {
                for cc in 0..w {
                    for dy in 0..s {
                        for dx in 0..s {
                            let px = ((f * hh + r * s + dy) * ww + cc * s + dx) * c;
                            let base = (dy * s + dx) * c;
                            patchvec[base..base + c].copy_from_slice(&src[px..px + c]);
                        }
                    }
                    let cell = ((f * h + r) * w + cc) * d;
                    for i in 0..d {
                        dst[cell + i] = crate::tensor::dot(&self.basis[i * d..(i + 1) * d], &patchvec);
                    }
                }
            }
        }
        Ok(LatentGrid { data: out, patch: s, origin: (t, hh, ww, c), fps: video.fps })
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<VideoClip> {
        let (t, h, w, d) = latent.dims();
        let s = self.patch;
        let (ot, oh, ow, oc) = latent.origin;
        if d != self.latent_dim() || oc != self.channels {
            return Err(CoreError::invalid(format!(
                "latent dim {d} does not match codec dim {}",
                self.latent_dim()
            )));
        }
        if ot != t || oh != h * s || ow != w * s {
            return Err(CoreError::invalid(format!(
                "latent {t}x{h}x{w} does not match origin shape {:?}",
                latent.origin
            )));
        }
        let mut out = Tensor::zeros(&[t, oh, ow, oc]);
        let src = latent.data.data();
        let dst = out.data_mut();
        let mut patchvec = vec![0.0; d];
        for f in 0..t {
            for r in 0..h {
                for cc in 0..w {
                    let cell = &src[((f * h + r) * w + cc) * d..((f * h + r) * w + cc + 1) * d];
                    // p = B^T . coeffs
                    patchvec.iter_mut().for_each(|x| *x = 0.0);
                    for i in 0..d {
                        crate::tensor::axpy(&mut patchvec, cell[i], &self.basis[i * d..(i + 1) * d]);
                    }
                    for dy in 0..s {
                        for dx in 0..s {
                            let px = ((f * oh + r * s + dy) * ow + cc * s + dx) * oc;
                            let base = (dy * s + dx) * oc;
                            dst[px..px + oc].copy_from_slice(&patchvec[base..base + oc]);
                        }
                    }
                }
            }
        }
        VideoClip::new(out, latent.fps)
    }
}

/// Max-pool a binary pixel mask to latent resolution: a latent cell is
/// editable if any covered pixel is editable.
pub fn downsample_mask(mask: &InstanceMask, s: usize) -> Result<LatentMask> {
    let (t, hh, ww) = mask.dims();
    if hh % s != 0 || ww % s != 0 {
        return Err(CoreError::invalid(format!(
            "mask {hh}x{ww} not divisible by patch size {s}"
        )));
    }
    let (h, w) = (hh / s, ww / s);
    let mut out = LatentMask::zeros(t, h, w);
    for f in 0..t {
        let src = mask.frame(f);
        let dst = &mut out.data.data_mut()[f * h * w..(f + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                let mut m = 0.0f64;
                for dy in 0..s {
                    for dx in 0..s {
                        m = m.max(src[(r * s + dy) * ww + c * s + dx]);
                    }
                }
                dst[r * w + c] = m;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour replication of each latent cell into its `s x s` patch.
pub fn upsample_mask(lmask: &LatentMask, s: usize) -> InstanceMask {
    let (t, h, w) = lmask.dims();
    let (hh, ww) = (h * s, w * s);
    let mut out = InstanceMask::zeros(t, hh, ww);
    for f in 0..t {
        let src = &lmask.data.data()[f * h * w..(f + 1) * h * w];
        let dst = out.frame_mut(f);
        for r in 0..hh {
            for c in 0..ww {
                dst[r * ww + c] = src[(r / s) * w + (c / s)];
            }
        }
    }
    out
}

//! The raw signal types: video clips, audio tracks and instance masks.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// `[T, H, W, C]` pixel tensor in `[0, 1]` plus a frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    pub data: Tensor,
    pub fps: u32,
}

impl VideoClip {
    pub fn new(data: Tensor, fps: u32) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(CoreError::invalid(format!(
                "video wants [T,H,W,C], got {:?}",
                data.shape()
            )));
        }
        Ok(VideoClip { data, fps })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let (_, h, w, c) = self.dims();
        let n = h * w * c;
        &self.data.data()[t * n..(t + 1) * n]
    }

    /// Duration in seconds.
    pub fn seconds(&self) -> f64 {
        self.dims().0 as f64 / self.fps as f64
    }
}

/// Mono sample sequence in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioTrack {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn silence(len: usize, sample_rate: u32) -> Self {
        AudioTrack { samples: vec![0.0; len], sample_rate }
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// `[T, H, W]` occupancy in `[0, 1]`; binary when produced by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub data: Tensor,
}

impl InstanceMask {
    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        InstanceMask { data: Tensor::zeros(&[t, h, w]) }
    }

    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(CoreError::invalid(format!("mask wants [T,H,W], got {:?}", data.shape())));
        }
        Ok(InstanceMask { data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let (_, h, w) = self.dims();
        &self.data.data()[t * h * w..(t + 1) * h * w]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let (_, h, w) = self.dims();
        &mut self.data.data_mut()[t * h * w..(t + 1) * h * w]
    }

    pub fn is_binary(&self) -> bool {
        self.data.data().iter().all(|&x| x == 0.0 || x == 1.0)
    }

    pub fn popcount(&self) -> usize {
        self.data.data().iter().filter(|&&x| x > 0.5).count()
    }

    /// Per-frame tight bounding box of the nonzero region, filled with ones.
    /// Frames with an empty mask stay empty.
    pub fn per_frame_bbox(&self) -> InstanceMask {
        let (t, h, w) = self.dims();
        let mut out = InstanceMask::zeros(t, h, w);
        for f in 0..t {
            let src = self.frame(f);
            let (mut r0, mut r1, mut c0, mut c1) = (h, 0usize, w, 0usize);
            let mut any = false;
            for r in 0..h {
                for c in 0..w {
                    if src[r * w + c] > 0.5 {
                        any = true;
                        r0 = r0.min(r);
                        r1 = r1.max(r);
                        c0 = c0.min(c);
                        c1 = c1.max(c);
                    }
                }
            }
            if any {
                let dst = out.frame_mut(f);
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        dst[r * w + c] = 1.0;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_of_single_pixel_is_that_pixel() {
        let mut m = InstanceMask::zeros(1, 5, 6);
        m.frame_mut(0)[2 * 6 + 3] = 1.0;
        let b = m.per_frame_bbox();
        assert_eq!(b.popcount(), 1);
        assert_eq!(b.frame(0)[2 * 6 + 3], 1.0);
    }

    #[test]
    fn bbox_of_full_frame_is_full_frame() {
        let m = InstanceMask { data: Tensor::filled(&[2, 4, 4], 1.0) };
        let b = m.per_frame_bbox();
        assert_eq!(b.popcount(), 32);
    }

    #[test]
    fn bbox_of_empty_frame_is_empty() {
        let m = InstanceMask::zeros(3, 4, 4);
        assert_eq!(m.per_frame_bbox().popcount(), 0);
    }
}

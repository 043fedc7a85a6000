//! Frame-aligned audio tokens: log band energies of each frame's window.

use crate::error::{CoreError, Result};
use crate::fft::{bin_freq, power_spectrum};
use crate::media::AudioTrack;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Lowest band edge (Hz); everything below is ignored (DC, sub-audio drift).
pub const BAND_FLOOR_HZ: f64 = 30.0;

/// `[T, bands]` features; band `b` of frame `f` is `log(1 + energy)` of the
/// frame's samples filtered to geometrically spaced band `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioTokens {
    pub data: Tensor,
}

impl AudioTokens {
    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let b = self.bands();
        &self.data.data()[f * b..(f + 1) * b]
    }

    pub fn silence(t: usize, bands: usize) -> AudioTokens {
        AudioTokens { data: Tensor::zeros(&[t, bands]) }
    }
}

/// Geometric band edges from the floor to Nyquist; `bands + 1` entries.
pub fn band_edges(bands: usize, sample_rate: f64) -> Vec<f64> {
    let nyquist = sample_rate / 2.0;
    let lo = BAND_FLOOR_HZ.min(nyquist / 2.0);
    (0..=bands).map(|b| lo * (nyquist / lo).powf(b as f64 / bands as f64)).collect()
}

/// Partition the track into `t` frame windows and pool DFT power into
/// log-spaced bands.
pub fn encode_audio(audio: &AudioTrack, t: usize, fps: u32, bands: usize) -> Result<AudioTokens> {
    if t == 0 || bands == 0 {
        return Err(CoreError::invalid("encode_audio wants t >= 1 and bands >= 1"));
    }
    let expected = t * audio.sample_rate as usize / fps as usize;
    if audio.samples.len() != expected || (t * audio.sample_rate as usize) % fps as usize != 0 {
        return Err(CoreError::invalid(format!(
            "audio length {} does not cover {t} frames at {fps} fps ({} samples expected)",
            audio.samples.len(),
            expected
        )));
    }
    let window = audio.samples.len() / t;
    let edges = band_edges(bands, audio.sample_rate as f64);
    let mut out = Tensor::zeros(&[t, bands]);
    for f in 0..t {
        let spec = power_spectrum(&audio.samples[f * window..(f + 1) * window]);
        let row = &mut out.data_mut()[f * bands..(f + 1) * bands];
        for (k, &p) in spec.iter().enumerate().skip(1) {
            let freq = bin_freq(k, window, audio.sample_rate as f64);
            if freq < edges[0] || freq > edges[bands] {
                continue;
            }
            let b = edges[1..].partition_point(|&e| e < freq).min(bands - 1);
            row[b] += p;
        }
        row.iter_mut().for_each(|x| *x = (1.0 + *x).ln());
    }
    if !out.all_finite() {
        return Err(CoreError::numerical("audio tokens non-finite"));
    }
    Ok(AudioTokens { data: out })
}

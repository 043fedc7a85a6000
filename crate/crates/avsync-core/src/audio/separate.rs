//! Zero-phase spectral-band separation: keep the named frequency bands,
//! zero everything else in the DFT domain, invert.

use crate::error::{CoreError, Result};
use crate::fft::{bin_freq, fft};
use crate::media::AudioTrack;
use serde::{Deserialize, Serialize};

/// A frequency band in Hz, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub lo: f64,
    pub hi: f64,
}

impl BandSpec {
    pub fn contains(&self, f: f64) -> bool {
        f >= self.lo && f <= self.hi
    }

    pub fn overlaps(&self, other: &BandSpec) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    /// Shrink the band symmetrically (feedback uses this to cut bleed).
    pub fn narrowed(&self, factor: f64) -> BandSpec {
        let c = 0.5 * (self.lo + self.hi);
        let half = 0.5 * (self.hi - self.lo) * factor;
        BandSpec { lo: (c - half).max(0.0), hi: c + half }
    }
}

/// Keep only the given bands of a track (binary spectral mask, zero phase).
/// An empty band list yields silence.
pub fn separate(audio: &AudioTrack, bands: &[BandSpec]) -> AudioTrack {
    if bands.is_empty() {
        return AudioTrack::silence(audio.samples.len(), audio.sample_rate);
    }
    let n = audio.samples.len();
    let sr = audio.sample_rate as f64;
    let mut re = audio.samples.clone();
    let mut im = vec![0.0; n];
    fft(&mut re, &mut im, false);
    for k in 0..n {
        // fold conjugate bins onto [0, nyquist]
        let kk = k.min(n - k);
        let f = bin_freq(kk, n, sr);
        if !bands.iter().any(|b| b.contains(f)) {
            re[k] = 0.0;
            im[k] = 0.0;
        }
    }
    fft(&mut re, &mut im, true);
    AudioTrack { samples: re, sample_rate: audio.sample_rate }
}

/// Total DFT power of the track inside a band.
pub fn band_energy(audio: &AudioTrack, band: BandSpec) -> f64 {
    let n = audio.samples.len();
    let sr = audio.sample_rate as f64;
    let spec = crate::fft::power_spectrum(&audio.samples);
    let mut e = 0.0;
    for (k, &p) in spec.iter().enumerate() {
        let f = bin_freq(k, n, sr);
        if band.contains(f) {
            // count both conjugate halves except DC/Nyquist
            let dup = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
            e += dup * p;
        }
    }
    e
}

/// RMS of the band-limited content.
pub fn band_rms(audio: &AudioTrack, band: BandSpec) -> f64 {
    let n = audio.samples.len() as f64;
    // Parseval: sum |x|^2 = (1/N) sum |X|^2
    (band_energy(audio, band) / (n * n)).sqrt()
}

/// Attenuation of a band from `before` to `after`, in dB (positive = quieter).
pub fn attenuation_db(before: &AudioTrack, after: &AudioTrack, band: BandSpec) -> f64 {
    let e0 = band_energy(before, band);
    let e1 = band_energy(after, band);
    if e0 <= 1e-18 {
        return 0.0;
    }
    10.0 * (e0 / e1.max(1e-18)).log10()
}

/// Error if dimensions disagree; used by remix.
pub fn check_compatible(a: &AudioTrack, b: &AudioTrack) -> Result<()> {
    if a.samples.len() != b.samples.len() || a.sample_rate != b.sample_rate {
        return Err(CoreError::invalid(format!(
            "tracks incompatible: {} samples @ {} Hz vs {} samples @ {} Hz",
            a.samples.len(),
            a.sample_rate,
            b.samples.len(),
            b.sample_rate
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::synth;

    fn hum_plus_tone() -> AudioTrack {
        let sr = 8000.0;
        let mut samples = vec![0.0; 8000];
        synth::add_hum(&mut samples, sr, 60.0, 0.3);
        for (n, s) in samples.iter_mut().enumerate() {
            *s += 0.4 * (std::f64::consts::TAU * 440.0 * n as f64 / sr).sin();
        }
        AudioTrack { samples, sample_rate: 8000 }
    }

    #[test]
    fn keeping_no_bands_is_silence() {
        let a = hum_plus_tone();
        let out = separate(&a, &[]);
        assert!(out.rms() < 1e-3);
    }

    #[test]
    fn keeping_hum_attenuates_the_tone_by_20_db() {
        let a = hum_plus_tone();
        let out = separate(&a, &[BandSpec { lo: 40.0, hi: 90.0 }]);
        let tone_band = BandSpec { lo: 370.0, hi: 523.0 };
        let att = attenuation_db(&a, &out, tone_band);
        assert!(att >= 20.0, "tone only attenuated by {att} dB");
        // hum survives
        let hum_att = attenuation_db(&a, &out, BandSpec { lo: 40.0, hi: 90.0 });
        assert!(hum_att < 1.0, "hum should pass through, lost {hum_att} dB");
    }

    #[test]
    fn output_length_matches_input() {
        let a = hum_plus_tone();
        let out = separate(&a, &[BandSpec { lo: 100.0, hi: 200.0 }]);
        assert_eq!(out.samples.len(), a.samples.len());
    }

    #[test]
    fn band_rms_tracks_parseval() {
        let a = hum_plus_tone();
        let full = BandSpec { lo: 0.0, hi: 4000.0 };
        assert!((band_rms(&a, full) - a.rms()).abs() < 1e-9);
    }

    #[test]
    fn narrowed_band_shrinks_symmetrically() {
        let b = BandSpec { lo: 100.0, hi: 300.0 }.narrowed(0.5);
        assert!((b.lo - 150.0).abs() < 1e-9 && (b.hi - 250.0).abs() < 1e-9);
    }
}

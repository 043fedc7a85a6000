//! Burst and hum primitives shared by the world generator and the audio
//! agent's track synthesizers, so generated audio matches scene timbre.

use crate::rng::Stream;

/// Linear attack/decay (triangular) envelope over `len` samples.
#[inline]
pub fn triangle_env(i: usize, len: usize) -> f64 {
    if len <= 1 {
        return 1.0;
    }
    let half = len as f64 / 2.0;
    let x = i as f64;
    if x < half {
        x / half
    } else {
        (len as f64 - x) / half
    }
}

pub fn add_hum(samples: &mut [f64], sr: f64, freq: f64, amp: f64) {
    for (n, s) in samples.iter_mut().enumerate() {
        *s += amp * (std::f64::consts::TAU * freq * n as f64 / sr).sin();
    }
}

/// Pure tone burst; bursts running past the end of the track are truncated.
pub fn add_tone_burst(samples: &mut [f64], sr: f64, onset: usize, len: usize, amp: f64, freq: f64) {
    for i in 0..len {
        let n = onset + i;
        if n >= samples.len() {
            break;
        }
        let t = i as f64 / sr;
        samples[n] += amp * triangle_env(i, len) * (std::f64::consts::TAU * freq * t).sin();
    }
}

/// Amplitude-modulation rate (Hz) of the speech-analog burst.
pub const MOD_RATE: f64 = 30.0;
pub const MOD_DEPTH: f64 = 0.5;

/// Amplitude-modulated tone burst: the "speech" analog.
pub fn add_mod_tone_burst(
    samples: &mut [f64],
    sr: f64,
    onset: usize,
    len: usize,
    amp: f64,
    freq: f64,
) {
    for i in 0..len {
        let n = onset + i;
        if n >= samples.len() {
            break;
        }
        let t = i as f64 / sr;
        let am = 1.0 - MOD_DEPTH * 0.5 * (1.0 - (std::f64::consts::TAU * MOD_RATE * t).cos());
        samples[n] += amp * am * triangle_env(i, len) * (std::f64::consts::TAU * freq * t).sin();
    }
}

/// Seeded random partials in a narrow band around `freq`; shared by every
/// burst of one noise voice so a scene's noise timbre is stable.
pub fn noise_partials(freq: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = Stream::new(seed, 0);
    (0..12)
        .map(|_| {
            (
                freq * rng.uniform_in(0.86, 1.17),
                rng.uniform_in(0.0, std::f64::consts::TAU),
            )
        })
        .collect()
}

/// Band-limited noise burst built from fixed partials.
pub fn add_partial_burst(
    samples: &mut [f64],
    sr: f64,
    onset: usize,
    len: usize,
    amp: f64,
    partials: &[(f64, f64)],
) {
    let scale = amp / (partials.len() as f64).sqrt();
    for i in 0..len {
        let n = onset + i;
        if n >= samples.len() {
            break;
        }
        let t = i as f64 / sr;
        let mut v = 0.0;
        for &(f, ph) in partials {
            v += (std::f64::consts::TAU * f * t + ph).sin();
        }
        samples[n] += scale * triangle_env(i, len) * v;
    }
}

/// Scale down so the peak does not exceed `limit`; quieter signals pass
/// through untouched.
pub fn peak_limit(samples: &mut [f64], limit: f64) {
    let peak = samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if peak > limit {
        let g = limit / peak;
        samples.iter_mut().for_each(|x| *x *= g);
    }
}

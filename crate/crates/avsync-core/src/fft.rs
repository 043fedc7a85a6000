//! Complex FFT: iterative radix-2 for power-of-two lengths, Bluestein's
//! chirp-z algorithm for everything else. Lengths here are small (frame
//! windows and whole desk-scale tracks), so clarity wins over micro-tuning.

use std::f64::consts::PI;

fn bit_reverse_permute(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
}

/// In-place radix-2 FFT; `n` must be a power of two.
fn fft_pow2(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    bit_reverse_permute(re, im);
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for i in start..start + len / 2 {
                let j = i + len / 2;
                let (ur, ui) = (re[i], im[i]);
                let (vr, vi) = (re[j] * cr - im[j] * ci, re[j] * ci + im[j] * cr);
                re[i] = ur + vr;
                im[i] = ui + vi;
                re[j] = ur - vr;
                im[j] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
        len <<= 1;
    }
    if inverse {
        let inv = 1.0 / n as f64;
        re.iter_mut().for_each(|x| *x *= inv);
        im.iter_mut().for_each(|x| *x *= inv);
    }
}

/// Bluestein's algorithm for arbitrary lengths.
fn fft_bluestein(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };

    // chirp[k] = exp(sign * i * pi * k^2 / n); k^2 mod 2n avoids precision loss.
    let mut chirp_r = vec![0.0; n];
    let mut chirp_i = vec![0.0; n];
    for k in 0..n {
        let ksq = (k as u64 * k as u64) % (2 * n as u64);
        let ang = sign * PI * ksq as f64 / n as f64;
        chirp_r[k] = ang.cos();
        chirp_i[k] = ang.sin();
    }

    // With chirp[m] = exp(sign * i*pi*m^2/n):
    //   a[m] = x[m] * chirp[m],  b[m] = conj(chirp[m]) (circularly mirrored),
    //   X[k] = chirp[k] * (a (*) b)[k].
    let mut ar = vec![0.0; m];
    let mut ai = vec![0.0; m];
    for k in 0..n {
        ar[k] = re[k] * chirp_r[k] - im[k] * chirp_i[k];
        ai[k] = im[k] * chirp_r[k] + re[k] * chirp_i[k];
    }
    let mut br = vec![0.0; m];
    let mut bi = vec![0.0; m];
    br[0] = chirp_r[0];
    bi[0] = -chirp_i[0];
    for k in 1..n {
        br[k] = chirp_r[k];
        bi[k] = -chirp_i[k];
        br[m - k] = chirp_r[k];
        bi[m - k] = -chirp_i[k];
    }

    fft_pow2(&mut ar, &mut ai, false);
    fft_pow2(&mut br, &mut bi, false);
    for k in 0..m {
        let (xr, xi) = (ar[k], ai[k]);
        ar[k] = xr * br[k] - xi * bi[k];
        ai[k] = xr * bi[k] + xi * br[k];
    }
    fft_pow2(&mut ar, &mut ai, true);

    for k in 0..n {
        re[k] = ar[k] * chirp_r[k] - ai[k] * chirp_i[k];
        im[k] = ai[k] * chirp_r[k] + ar[k] * chirp_i[k];
    }
    if inverse {
        let inv = 1.0 / n as f64;
        re.iter_mut().for_each(|x| *x *= inv);
        im.iter_mut().for_each(|x| *x *= inv);
    }
}

/// In-place complex FFT of any length (inverse includes the 1/N factor).
pub fn fft(re: &mut [f64], im: &mut [f64], inverse: bool) {
    assert_eq!(re.len(), im.len());
    let n = re.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_pow2(re, im, inverse);
    } else {
        fft_bluestein(re, im, inverse);
    }
}

/// DFT of a real signal; returns (re, im) of all N bins.
pub fn real_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut re = x.to_vec();
    let mut im = vec![0.0; x.len()];
    fft(&mut re, &mut im, false);
    (re, im)
}

/// Power per bin (|X_k|^2) for bins `0..=N/2` of a real signal.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let (re, im) = real_dft(x);
    let half = x.len() / 2;
    (0..=half).map(|k| re[k] * re[k] + im[k] * im[k]).collect()
}

/// Frequency of bin `k` for sample rate `sr` and window length `n`.
pub fn bin_freq(k: usize, n: usize, sr: f64) -> f64 {
    k as f64 * sr / n as f64
}

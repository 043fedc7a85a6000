//! Branch-light `exp`/`tanh`/`sigmoid` for the transformer hot loops.
//!
//! Softmax and the activations account for millions of transcendental calls
//! per training step; the range-reduced degree-7 polynomial below is ~5e-9
//! relative accuracy (ample for f64 training and the 1e-3 gradient checks)
//! and lets LLVM keep the surrounding loops vectorized.

/// exp(x) with ~5e-9 relative error.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    let x = x.clamp(-708.0, 708.0);
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 0.693_147_180_369_123_8;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let n = (x * LOG2E).round();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // degree-7 Taylor on |r| <= ln(2)/2
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    let bits = (((n as i64) + 1023) << 52) as u64;
    p * f64::from_bits(bits)
}

/// tanh(x) via `fast_exp`.
#[inline]
pub fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / (fast_exp(2.0 * x) + 1.0)
}

/// Logistic function via `fast_exp`.
#[inline]
pub fn fast_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + fast_exp(-x))
}

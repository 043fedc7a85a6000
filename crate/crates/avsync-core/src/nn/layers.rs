//! Layer primitives with hand-written backward passes. Each forward returns
//! whatever the matching backward needs; the finite-difference tests at the
//! bottom pin every derivative.

use super::params::{Grads, Init, ParamId, ParamSet};
use crate::rng::Stream;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn_acc};
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `y = x W^T + b`, weights stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut Stream,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Linear {
        let w = ps.add(&format!("{name}.w"), &[out_dim, in_dim], init, rng);
        let b = ps.add(&format!("{name}.b"), &[out_dim], Init::Zeros, rng);
        Linear { w, b, in_dim, out_dim }
    }

    /// Standard fan-in scaled init.
    pub fn init_default(
        ps: &mut ParamSet,
        rng: &mut Stream,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Linear {
        Linear::init(ps, rng, name, in_dim, out_dim, Init::Normal(1.0 / (in_dim as f64).sqrt()))
    }

    pub fn forward(&self, ps: &ParamSet, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.out_dim];
        matmul_nt(&mut y, x, ps.get(self.w).data(), rows, self.in_dim, self.out_dim);
        let b = ps.get(self.b).data();
        for r in y.chunks_mut(self.out_dim) {
            for (v, bv) in r.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    /// Accumulates dW/db and returns dx. `x` is the forward input.
    pub fn backward(
        &self,
        ps: &ParamSet,
        grads: &mut Grads,
        x: &[f64],
        dy: &[f64],
        rows: usize,
    ) -> Vec<f64> {
        matmul_tn_acc(
            grads.get_mut(self.w).data_mut(),
            dy,
            x,
            rows,
            self.out_dim,
            self.in_dim,
        );
        let db = grads.get_mut(self.b).data_mut();
        for r in dy.chunks(self.out_dim) {
            for (g, v) in db.iter_mut().zip(r) {
                *g += v;
            }
        }
        let mut dx = vec![0.0; rows * self.in_dim];
        matmul_nn(&mut dx, dy, ps.get(self.w).data(), rows, self.out_dim, self.in_dim);
        dx
    }
}

// ---------------------------------------------------------------------------
// LayerNorm (no affine)
// ---------------------------------------------------------------------------

pub struct LnCache {
    /// Normalized output.
    pub y: Vec<f64>,
    /// Per-row 1/std.
    pub inv: Vec<f64>,
}

const LN_EPS: f64 = 1e-6;
const PAR_ROW_THRESHOLD: usize = 512;

pub fn layernorm_fwd(x: &[f64], rows: usize, d: usize) -> LnCache {
    let mut y = vec![0.0; rows * d];
    let mut inv = vec![0.0; rows];
    let body = |(yr, (xr, ivr)): (&mut [f64], (&[f64], &mut [f64]))| {
        for i in 0..yr.len() / d {
            let xs = &xr[i * d..(i + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let iv = 1.0 / (var + LN_EPS).sqrt();
            ivr[i] = iv;
            for (o, v) in yr[i * d..(i + 1) * d].iter_mut().zip(xs) {
                *o = (v - mean) * iv;
            }
        }
    };
    if rows >= PAR_ROW_THRESHOLD {
        y.par_chunks_mut(128 * d)
            .zip(x.par_chunks(128 * d).zip(inv.par_chunks_mut(128)))
            .for_each(body);
    } else {
        body((&mut y, (x, &mut inv)));
    }
    LnCache { y, inv }
}

pub fn layernorm_bwd(cache: &LnCache, dy: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let body = |(dxr, (dyr, (yr, ivr))): (&mut [f64], (&[f64], (&[f64], &[f64])))| {
        for i in 0..dxr.len() / d {
            let y = &yr[i * d..(i + 1) * d];
            let dyv = &dyr[i * d..(i + 1) * d];
            let mean_dy = dyv.iter().sum::<f64>() / d as f64;
            let mean_dyy = dyv.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let iv = ivr[i];
            for ((o, &dyi), &yi) in dxr[i * d..(i + 1) * d].iter_mut().zip(dyv).zip(y) {
                *o = iv * (dyi - mean_dy - yi * mean_dyy);
            }
        }
    };
    if rows >= PAR_ROW_THRESHOLD {
        dx.par_chunks_mut(128 * d)
            .zip(dy.par_chunks(128 * d).zip(cache.y.par_chunks(128 * d).zip(cache.inv.par_chunks(128))))
            .for_each(body);
    } else {
        body((&mut dx, (dy, (&cache.y, &cache.inv))));
    }
    dx
}

// ---------------------------------------------------------------------------
// Per-clip modulation and gating (AdaLN pieces)
// ---------------------------------------------------------------------------

/// `y = x * (1 + gamma) + beta`, with `gamma`/`beta` shared over all rows.
pub fn modulate_fwd(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * d];
    for r in 0..rows {
        for i in 0..d {
            y[r * d + i] = x[r * d + i] * (1.0 + gamma[i]) + beta[i];
        }
    }
    y
}

/// Returns dx and accumulates dgamma/dbeta.
pub fn modulate_bwd(
    x: &[f64],
    gamma: &[f64],
    dy: &[f64],
    rows: usize,
    d: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    for r in 0..rows {
        for i in 0..d {
            let g = dy[r * d + i];
            dx[r * d + i] = g * (1.0 + gamma[i]);
            dgamma[i] += g * x[r * d + i];
            dbeta[i] += g;
        }
    }
    dx
}

/// `x += alpha * u` (gated residual). Returns du and accumulates dalpha.
pub fn gate_bwd(
    u: &[f64],
    alpha: &[f64],
    dx_out: &[f64],
    rows: usize,
    d: usize,
    dalpha: &mut [f64],
) -> Vec<f64> {
    let mut du = vec![0.0; rows * d];
    for r in 0..rows {
        for i in 0..d {
            let g = dx_out[r * d + i];
            du[r * d + i] = g * alpha[i];
            dalpha[i] += g * u[r * d + i];
        }
    }
    du
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

use crate::fastmath::{fast_exp, fast_tanh};

pub fn gelu_fwd(x: &[f64]) -> Vec<f64> {
    let f = |v: &f64| {
        let v = *v;
        0.5 * v * (1.0 + fast_tanh(GELU_C * (v + GELU_A * v * v * v)))
    };
    if x.len() >= 1 << 15 {
        x.par_iter().map(f).collect()
    } else {
        x.iter().map(f).collect()
    }
}

pub fn gelu_bwd(x: &[f64], dy: &[f64]) -> Vec<f64> {
    let f = |(&v, &g): (&f64, &f64)| {
        let t = fast_tanh(GELU_C * (v + GELU_A * v * v * v));
        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        g * d
    };
    if x.len() >= 1 << 15 {
        x.par_iter().zip(dy).map(f).collect()
    } else {
        x.iter().zip(dy).map(f).collect()
    }
}

pub fn silu_fwd(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v / (1.0 + fast_exp(-v))).collect()
}

pub fn silu_bwd(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = 1.0 / (1.0 + fast_exp(-v));
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    crate::fastmath::fast_sigmoid(x)
}

// ---------------------------------------------------------------------------
// Sinusoidal embeddings
// ---------------------------------------------------------------------------

/// Interleaved sin/cos embedding of a scalar position.
pub fn sinusoid(pos: f64, dim: usize, base: f64) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = base.powf(-(i as f64) / half.max(1) as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = (pos / base).sin();
    }
    out
}

/// Fixed 3-D (frame, row, col) positional encoding table for `n_frames`
/// (+ one sentinel frame index for reference tokens) by `h x w` cells.
pub struct Pe3d {
    pub frames: Vec<Vec<f64>>,
    pub rows: Vec<Vec<f64>>,
    pub cols: Vec<Vec<f64>>,
    pub d: usize,
    df: usize,
    dr: usize,
}

impl Pe3d {
    pub fn new(n_frames: usize, h: usize, w: usize, d: usize) -> Pe3d {
        let df = d / 2;
        let dr = d / 4;
        let dc = d - df - dr;
        Pe3d {
            frames: (0..=n_frames).map(|f| sinusoid(f as f64, df, 100.0)).collect(),
            rows: (0..h).map(|r| sinusoid(r as f64, dr, 100.0)).collect(),
            cols: (0..w).map(|c| sinusoid(c as f64, dc, 100.0)).collect(),
            d,
            df,
            dr,
        }
    }

    /// Add the encoding for cell (f, r, c) onto a token embedding.
    pub fn add_to(&self, out: &mut [f64], f: usize, r: usize, c: usize) {
        debug_assert_eq!(out.len(), self.d);
        for (o, v) in out[..self.df].iter_mut().zip(&self.frames[f]) {
            *o += v;
        }
        for (o, v) in out[self.df..self.df + self.dr].iter_mut().zip(&self.rows[r]) {
            *o += v;
        }
        for (o, v) in out[self.df + self.dr..].iter_mut().zip(&self.cols[c]) {
            *o += v;
        }
    }
}

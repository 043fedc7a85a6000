//! Dense row-major f64 tensors and the handful of linear-algebra kernels the
//! transformer stack is built from.
//!
//! The kernels come in sequential flavours (`*_seq`) for use inside rayon
//! loops, plus parallel wrappers that chunk over output rows. Every reduction
//! combines partial results in a fixed order, so results are bit-identical
//! regardless of thread count.

use crate::error::{CoreError, Result};
use crate::rng::Stream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::invalid(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// I.i.d. normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Stream) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(CoreError::invalid(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Dot product with eight accumulators so FMA lanes stay busy.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (pa, pb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] = pa[l].mul_add(pb[l], acc[l]);
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in chunks * 8..a.len() {
        s = a[i].mul_add(b[i], s);
    }
    s
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi.mul_add(alpha, *yi);
    }
}

/// `c[m x n] = a[m x k] . b[n x k]^T` (rows of `b` are the right-hand vectors).
pub fn matmul_nt_seq(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for (j, cij) in cr.iter_mut().enumerate() {
            *cij = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m x n] = a[m x k] . b[k x n]`.
pub fn matmul_nn_seq(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let cr = &mut c[i * n..(i + 1) * n];
        cr.iter_mut().for_each(|x| *x = 0.0);
        for l in 0..k {
            axpy(cr, a[i * k + l], &b[l * n..(l + 1) * n]);
        }
    }
}

/// `c[m x n] += a[r x m]^T . b[r x n]` (reduction over `r` rows).
pub fn matmul_tn_acc_seq(c: &mut [f64], a: &[f64], b: &[f64], r: usize, m: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    for row in 0..r {
        let br = &b[row * n..(row + 1) * n];
        for i in 0..m {
            let w = a[row * m + i];
            if w != 0.0 {
                axpy(&mut c[i * n..(i + 1) * n], w, br);
            }
        }
    }
}

/// Rows per rayon task; keeps task count small relative to row counts we see.
const PAR_ROWS: usize = 128;

/// Parallel `c = a . b^T` over row chunks of `a`.
pub fn matmul_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    if m * k * n < 1 << 18 {
        return matmul_nt_seq(c, a, b, m, k, n);
    }
    c.par_chunks_mut(PAR_ROWS * n).zip(a.par_chunks(PAR_ROWS * k)).for_each(|(cc, ac)| {
        matmul_nt_seq(cc, ac, b, ac.len() / k, k, n);
    });
}

/// Parallel `c = a . b` over row chunks of `a`.
pub fn matmul_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    if m * k * n < 1 << 18 {
        return matmul_nn_seq(c, a, b, m, k, n);
    }
    c.par_chunks_mut(PAR_ROWS * n).zip(a.par_chunks(PAR_ROWS * k)).for_each(|(cc, ac)| {
        matmul_nn_seq(cc, ac, b, ac.len() / k, k, n);
    });
}

/// Parallel `c += a^T . b`; partial sums are combined in chunk order so the
/// result does not depend on scheduling.
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], r: usize, m: usize, n: usize) {
    if r * m * n < 1 << 18 {
        return matmul_tn_acc_seq(c, a, b, r, m, n);
    }
    let chunk = PAR_ROWS.max(r / (4 * rayon::current_num_threads().max(1)));
    let partials: Vec<Vec<f64>> = a
        .par_chunks(chunk * m)
        .zip(b.par_chunks(chunk * n))
        .map(|(ac, bc)| {
            let mut p = vec![0.0; m * n];
            matmul_tn_acc_seq(&mut p, ac, bc, ac.len() / m, m, n);
            p
        })
        .collect();
    for p in partials {
        for (ci, pi) in c.iter_mut().zip(p) {
            *ci += pi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[j * k + l];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_nt_matches_naive() {
        let mut rng = Stream::new(1, 0);
        let (m, k, n) = (37, 19, 23);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..n * k).map(|_| rng.normal()).collect();
        let mut c = vec![0.0; m * n];
        matmul_nt(&mut c, &a, &b, m, k, n);
        let want = naive_nt(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_nn_matches_naive() {
        let mut rng = Stream::new(2, 0);
        let (m, k, n) = (17, 29, 13);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let mut c = vec![0.0; m * n];
        matmul_nn(&mut c, &a, &b, m, k, n);
        // b^T rows are the columns of b
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let want = naive_nt(&a, &bt, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_tn_acc_matches_naive() {
        let mut rng = Stream::new(3, 0);
        let (r, m, n) = (41, 11, 7);
        let a: Vec<f64> = (0..r * m).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..r * n).map(|_| rng.normal()).collect();
        let mut c = vec![0.0; m * n];
        matmul_tn_acc(&mut c, &a, &b, r, m, n);
        let mut want = vec![0.0; m * n];
        for row in 0..r {
            for i in 0..m {
                for j in 0..n {
                    want[i * n + j] += a[row * m + i] * b[row * n + j];
                }
            }
        }
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_kernels_are_bit_deterministic() {
        let mut rng = Stream::new(4, 0);
        let (m, k, n) = (512, 64, 64);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..n * k).map(|_| rng.normal()).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        matmul_nt(&mut c1, &a, &b, m, k, n);
        matmul_nt(&mut c2, &a, &b, m, k, n);
        assert_eq!(c1, c2);
        let b2: Vec<f64> = (0..m * n).map(|_| rng.normal()).collect();
        let mut g1 = vec![0.0; k * n];
        let mut g2 = vec![0.0; k * n];
        matmul_tn_acc(&mut g1, &a, &b2, m, k, n);
        matmul_tn_acc(&mut g2, &a, &b2, m, k, n);
        assert_eq!(g1, g2);
    }

    #[test]
    fn reshape_checks_element_count() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(t.clone().reshaped(&[3, 2]).is_ok());
        assert!(t.reshaped(&[4, 2]).is_err());
    }
}

//! Grouped multi-head attention.
//!
//! A group is a (query rows, key/value rows) pair; groups express frame-local
//! self-attention, windowed audio attention, and frame-aligned video
//! cross-attention with one kernel. Rows not covered by any group pass
//! through with zero output (no bias), so their residual stream is untouched.
//! Backward recomputes softmax from the cached projections instead of storing
//! attention matrices.

use super::layers::Linear;
use super::params::{Grads, ParamSet};
use crate::tensor::{matmul_nn_seq, matmul_nt_seq, matmul_tn_acc_seq};
use rayon::prelude::*;
use std::ops::Range;

#[derive(Debug, Clone)]
pub struct AttnGroup {
    pub q: Range<usize>,
    pub kv: Range<usize>,
    /// Extra key/value rows appended after `kv` (reference tokens).
    pub kv_extra: Option<Range<usize>>,
}

impl AttnGroup {
    pub fn plain(q: Range<usize>, kv: Range<usize>) -> Self {
        AttnGroup { q, kv, kv_extra: None }
    }

    fn kv_len(&self) -> usize {
        self.kv.len() + self.kv_extra.as_ref().map_or(0, |r| r.len())
    }
}

#[derive(Debug, Clone)]
pub struct MhAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    ctx: Vec<f64>,
    covered: Vec<bool>,
    nq: usize,
    nkv: usize,
}

fn gather_head(dst: &mut Vec<f64>, x: &[f64], d: usize, dh: usize, h: usize, g: &AttnGroup, kv: bool) {
    dst.clear();
    let mut push = |range: &Range<usize>| {
        for r in range.clone() {
            dst.extend_from_slice(&x[r * d + h * dh..r * d + h * dh + dh]);
        }
    };
    if kv {
        push(&g.kv);
        if let Some(extra) = &g.kv_extra {
            push(extra);
        }
    } else {
        push(&g.q);
    }
}

fn softmax_rows(scores: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut scores[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = crate::fastmath::fast_exp(*v - max);
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

impl MhAttention {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut crate::rng::Stream,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> MhAttention {
        assert!(dim % heads == 0, "model dim must divide heads");
        MhAttention {
            wq: Linear::init_default(ps, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::init_default(ps, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::init_default(ps, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::init_default(ps, rng, &format!("{name}.wo"), dim, dim),
            heads,
            dim,
        }
    }

    /// `xq`: `nq x d` query-side tokens; `xkv`: `nkv x d` key/value tokens
    /// (may be the same buffer for self-attention).
    pub fn forward(
        &self,
        ps: &ParamSet,
        xq: &[f64],
        nq: usize,
        xkv: &[f64],
        nkv: usize,
        groups: &[AttnGroup],
    ) -> (Vec<f64>, AttnCache) {
        debug_assert!(groups.iter().all(|g| g.kv_len() > 0));
        let d = self.dim;
        let dh = d / self.heads;
        let q = self.wq.forward(ps, xq, nq);
        let k = self.wk.forward(ps, xkv, nkv);
        let v = self.wv.forward(ps, xkv, nkv);
        let mut ctx = vec![0.0; nq * d];
        let scale = 1.0 / (dh as f64).sqrt();

        // Query rows are disjoint across groups; each group computes its own
        // context block which is scattered back in group order.
        let group_ctx: Vec<Vec<f64>> = groups
            .par_iter()
            .map(|g| {
                let qs = g.q.len();
                let ks = g.kv_len();
                let mut qh = Vec::with_capacity(qs * dh);
                let mut kh = Vec::with_capacity(ks * dh);
                let mut vh = Vec::with_capacity(ks * dh);
                let mut scores = vec![0.0; qs * ks];
                let mut out = vec![0.0; qs * dh];
                let mut ctx_g = vec![0.0; qs * d];
                for h in 0..self.heads {
                    gather_head(&mut qh, &q, d, dh, h, g, false);
                    gather_head(&mut kh, &k, d, dh, h, g, true);
                    gather_head(&mut vh, &v, d, dh, h, g, true);
                    matmul_nt_seq(&mut scores, &qh, &kh, qs, dh, ks);
                    scores.iter_mut().for_each(|s| *s *= scale);
                    softmax_rows(&mut scores, qs, ks);
                    matmul_nn_seq(&mut out, &scores, &vh, qs, ks, dh);
                    for i in 0..qs {
                        ctx_g[i * d + h * dh..i * d + (h + 1) * dh]
                            .copy_from_slice(&out[i * dh..(i + 1) * dh]);
                    }
                }
                ctx_g
            })
            .collect();
        for (g, ctx_g) in groups.iter().zip(group_ctx) {
            for (i, row) in g.q.clone().enumerate() {
                ctx[row * d..(row + 1) * d].copy_from_slice(&ctx_g[i * d..(i + 1) * d]);
            }
        }

        let mut covered = vec![false; nq];
        for g in groups {
            for r in g.q.clone() {
                covered[r] = true;
            }
        }
        let mut y = vec![0.0; nq * d];
        let wo_w = ps.get(self.wo.w).data();
        let wo_b = ps.get(self.wo.b).data();
        for r in 0..nq {
            if covered[r] {
                matmul_nt_seq(&mut y[r * d..(r + 1) * d], &ctx[r * d..(r + 1) * d], wo_w, 1, d, d);
                for (o, b) in y[r * d..(r + 1) * d].iter_mut().zip(wo_b) {
                    *o += b;
                }
            }
        }
        (y, AttnCache { q, k, v, ctx, covered, nq, nkv })
    }

    /// Returns (dxq, dxkv); caller adds them when the sources coincide.
    pub fn backward(
        &self,
        ps: &ParamSet,
        grads: &mut Grads,
        xq: &[f64],
        xkv: &[f64],
        cache: &AttnCache,
        groups: &[AttnGroup],
        dy: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let dh = d / self.heads;
        let (nq, nkv) = (cache.nq, cache.nkv);
        let scale = 1.0 / (dh as f64).sqrt();

        // Through wo: only covered rows produced output, so mask dy first.
        let mut dy_masked = dy.to_vec();
        for r in 0..nq {
            if !cache.covered[r] {
                dy_masked[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut dctx = vec![0.0; nq * d];
        {
            let wo_w = ps.get(self.wo.w).data();
            for r in 0..nq {
                if cache.covered[r] {
                    matmul_nn_seq(
                        &mut dctx[r * d..(r + 1) * d],
                        &dy_masked[r * d..(r + 1) * d],
                        wo_w,
                        1,
                        d,
                        d,
                    );
                }
            }
        }
        {
            let dbo = grads.get_mut(self.wo.b).data_mut();
            for r in dy_masked.chunks(d) {
                for (g, v) in dbo.iter_mut().zip(r) {
                    *g += v;
                }
            }
        }
        matmul_tn_acc_seq(grads.get_mut(self.wo.w).data_mut(), &dy_masked, &cache.ctx, nq, d, d);

        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nkv * d];
        let mut dv = vec![0.0; nkv * d];

        // Key/value rows can be shared between groups (windows, reference
        // tokens), so groups run sequentially; heads write disjoint column
        // slices and could be parallelized if ever needed.
        let mut qh = Vec::new();
        let mut kh = Vec::new();
        let mut vh = Vec::new();
        for g in groups {
            let qs = g.q.len();
            let ks = g.kv_len();
            let mut scores = vec![0.0; qs * ks];
            let mut da = vec![0.0; qs * ks];
            let mut dqh = vec![0.0; qs * dh];
            let mut dkh = vec![0.0; ks * dh];
            let mut dvh = vec![0.0; ks * dh];
            let mut dctx_h = vec![0.0; qs * dh];
            for h in 0..self.heads {
                gather_head(&mut qh, &cache.q, d, dh, h, g, false);
                gather_head(&mut kh, &cache.k, d, dh, h, g, true);
                gather_head(&mut vh, &cache.v, d, dh, h, g, true);
                matmul_nt_seq(&mut scores, &qh, &kh, qs, dh, ks);
                scores.iter_mut().for_each(|s| *s *= scale);
                softmax_rows(&mut scores, qs, ks);

                for (i, row) in g.q.clone().enumerate() {
                    dctx_h[i * dh..(i + 1) * dh]
                        .copy_from_slice(&dctx[row * d + h * dh..row * d + h * dh + dh]);
                }
                // dV = A^T dctx
                dvh.iter_mut().for_each(|x| *x = 0.0);
                matmul_tn_acc_seq(&mut dvh, &scores, &dctx_h, qs, ks, dh);
                // dA = dctx V^T
                matmul_nt_seq(&mut da, &dctx_h, &vh, qs, dh, ks);
                // dS = A * (dA - rowsum(dA * A)), scaled
                for r in 0..qs {
                    let a = &scores[r * ks..(r + 1) * ks];
                    let dar = &mut da[r * ks..(r + 1) * ks];
                    let dot: f64 = a.iter().zip(dar.iter()).map(|(x, y)| x * y).sum();
                    for (ds, &av) in dar.iter_mut().zip(a) {
                        *ds = av * (*ds - dot) * scale;
                    }
                }
                // dQ = dS K ; dK = dS^T Q
                matmul_nn_seq(&mut dqh, &da, &kh, qs, ks, dh);
                dkh.iter_mut().for_each(|x| *x = 0.0);
                matmul_tn_acc_seq(&mut dkh, &da, &qh, qs, ks, dh);

                for (i, row) in g.q.clone().enumerate() {
                    crate::tensor::axpy(
                        &mut dq[row * d + h * dh..row * d + h * dh + dh],
                        1.0,
                        &dqh[i * dh..(i + 1) * dh],
                    );
                }
                let scatter = |range: &Range<usize>, offset: usize, buf: &[f64], dst: &mut [f64]| {
                    for (i, row) in range.clone().enumerate() {
                        crate::tensor::axpy(
                            &mut dst[row * d + h * dh..row * d + h * dh + dh],
                            1.0,
                            &buf[(offset + i) * dh..(offset + i + 1) * dh],
                        );
                    }
                };
                scatter(&g.kv, 0, &dkh, &mut dk);
                scatter(&g.kv, 0, &dvh, &mut dv);
                if let Some(extra) = &g.kv_extra {
                    scatter(extra, g.kv.len(), &dkh, &mut dk);
                    scatter(extra, g.kv.len(), &dvh, &mut dv);
                }
            }
        }

        let dxq = self.wq.backward(ps, grads, xq, &dq, nq);
        let mut dxkv = self.wk.backward(ps, grads, xkv, &dk, nkv);
        let dxv = self.wv.backward(ps, grads, xkv, &dv, nkv);
        for (a, b) in dxkv.iter_mut().zip(&dxv) {
            *a += b;
        }
        (dxq, dxkv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamSet;
    use crate::rng::Stream;

    fn setup(dim: usize, heads: usize) -> (ParamSet, MhAttention, Stream) {
        let mut rng = Stream::new(42, 0);
        let mut ps = ParamSet::new();
        let mh = MhAttention::init(&mut ps, &mut rng, "attn", dim, heads);
        (ps, mh, rng)
    }

    #[test]
    fn self_attention_gradients_match_fd() {
        let (ps, mh, mut rng) = setup(8, 2);
        let n = 5;
        let x: Vec<f64> = (0..n * 8).map(|_| rng.normal()).collect();
        let dy: Vec<f64> = (0..n * 8).map(|_| rng.normal()).collect();
        let groups = vec![AttnGroup::plain(0..3, 0..3), AttnGroup::plain(3..5, 3..5)];

        let loss = |ps: &ParamSet, xv: &[f64]| {
            let (y, _) = mh.forward(ps, xv, n, xv, n, &groups);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };

        let (_, cache) = mh.forward(&ps, &x, n, &x, n, &groups);
        let mut grads = Grads::zeros_like(&ps);
        let (dxq, dxkv) = mh.backward(&ps, &mut grads, &x, &x, &cache, &groups, &dy);
        let dx: Vec<f64> = dxq.iter().zip(&dxkv).map(|(a, b)| a + b).collect();

        let h = 1e-5;
        for i in 0..x.len() {
            let mut up = x.clone();
            up[i] += h;
            let mut dn = x.clone();
            dn[i] -= h;
            let fd = (loss(&ps, &up) - loss(&ps, &dn)) / (2.0 * h);
            let rel = (dx[i] - fd).abs() / dx[i].abs().max(fd.abs()).max(1e-9);
            assert!(rel < 1e-5, "x[{i}] {} vs {fd}", dx[i]);
        }

        // parameter gradients for one projection
        let wid = mh.wq.w;
        for i in [0usize, 7, 33] {
            let mut ps2 = ps.clone();
            ps2.get_mut(wid).data_mut()[i] += h;
            let up = loss(&ps2, &x);
            ps2.get_mut(wid).data_mut()[i] -= 2.0 * h;
            let dn = loss(&ps2, &x);
            let fd = (up - dn) / (2.0 * h);
            let g = grads.get(wid).data()[i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-9);
            assert!(rel < 1e-5, "wq[{i}] {g} vs {fd}");
        }
    }

    #[test]
    fn cross_attention_with_shared_kv_rows_matches_fd() {
        // overlapping kv windows exercise the shared-row accumulation
        let (ps, mh, mut rng) = setup(8, 2);
        let (nq, nkv) = (4, 3);
        let xq: Vec<f64> = (0..nq * 8).map(|_| rng.normal()).collect();
        let xkv: Vec<f64> = (0..nkv * 8).map(|_| rng.normal()).collect();
        let dy: Vec<f64> = (0..nq * 8).map(|_| rng.normal()).collect();
        let groups = vec![AttnGroup::plain(0..2, 0..2), AttnGroup::plain(2..4, 1..3)];

        let loss = |xk: &[f64]| {
            let (y, _) = mh.forward(&ps, &xq, nq, xk, nkv, &groups);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = mh.forward(&ps, &xq, nq, &xkv, nkv, &groups);
        let mut grads = Grads::zeros_like(&ps);
        let (_, dxkv) = mh.backward(&ps, &mut grads, &xq, &xkv, &cache, &groups, &dy);

        let h = 1e-5;
        for i in 0..xkv.len() {
            let mut up = xkv.clone();
            up[i] += h;
            let mut dn = xkv.clone();
            dn[i] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            let rel = (dxkv[i] - fd).abs() / dxkv[i].abs().max(fd.abs()).max(1e-9);
            assert!(rel < 1e-5, "xkv[{i}] {} vs {fd}", dxkv[i]);
        }
    }

    #[test]
    fn uncovered_rows_produce_zero_output() {
        let (ps, mh, mut rng) = setup(8, 2);
        let n = 4;
        let x: Vec<f64> = (0..n * 8).map(|_| rng.normal()).collect();
        let groups = vec![AttnGroup::plain(0..2, 0..2)];
        let (y, _) = mh.forward(&ps, &x, n, &x, n, &groups);
        assert!(y[2 * 8..].iter().all(|&v| v == 0.0));
        assert!(y[..2 * 8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn kv_extra_range_participates() {
        let (ps, mh, mut rng) = setup(8, 2);
        let n = 6;
        let x: Vec<f64> = (0..n * 8).map(|_| rng.normal()).collect();
        let with_extra =
            vec![AttnGroup { q: 0..2, kv: 0..2, kv_extra: Some(4..6) }];
        let without = vec![AttnGroup::plain(0..2, 0..2)];
        let (ya, _) = mh.forward(&ps, &x, n, &x, n, &with_extra);
        let (yb, _) = mh.forward(&ps, &x, n, &x, n, &without);
        assert!(ya.iter().zip(&yb).any(|(a, b)| (a - b).abs() > 1e-9));
    }
}

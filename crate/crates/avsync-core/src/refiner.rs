//! Mask granularity: the precision factor, the degradation operator that
//! coarsens ground-truth masks for training and user-mask simulation, the
//! focal objective for refinement, and the per-step degradation schedules.

use crate::codec::LatentMask;
use crate::error::{CoreError, Result};
use crate::media::InstanceMask;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Upper end of the precision-factor range: `p = 0` is the exact contour,
/// `p = PRECISION_MAX` a bounding box.
pub const PRECISION_MAX: f64 = 10.0;

/// Binarization threshold applied after blurring; low enough that the
/// degraded mask dilates (covers the instance) rather than erodes.
pub const DEGRADE_THRESHOLD: f64 = 0.1;

/// Blur parameters derived from a precision factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub kernel: usize,
    pub sigma: f64,
    pub threshold: f64,
}

pub fn degradation_params(p: f64) -> Result<DegradationParams> {
    if !(0.0..=PRECISION_MAX).contains(&p) {
        return Err(CoreError::invalid(format!(
            "precision factor {p} outside [0, {PRECISION_MAX}]"
        )));
    }
    Ok(DegradationParams {
        kernel: 2 * (p.ceil() as usize) + 1,
        sigma: p / 2.0,
        threshold: DEGRADE_THRESHOLD,
    })
}

fn gaussian_kernel(params: DegradationParams) -> Vec<f64> {
    let half = (params.kernel - 1) / 2;
    if params.sigma <= 0.0 {
        let mut k = vec![0.0; params.kernel];
        k[half] = 1.0;
        return k;
    }
    let s2 = 2.0 * params.sigma * params.sigma;
    let mut k: Vec<f64> = (0..params.kernel)
        .map(|i| {
            let d = i as f64 - half as f64;
            (-d * d / s2).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= sum);
    k
}

/// Separable 2-D Gaussian blur of one frame with zero padding.
fn blur_frame(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let half = (k.len() - 1) as i64 / 2;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let cc = c as i64 + i as i64 - half;
                if cc >= 0 && (cc as usize) < w {
                    acc += kv * src[r * w + cc as usize];
                }
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let rr = r as i64 + i as i64 - half;
                if rr >= 0 && (rr as usize) < h {
                    acc += kv * tmp[rr as usize * w + c];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Degrade a precise binary mask to granularity `p`.
///
/// `p = 0` is the identity and `p = PRECISION_MAX` the per-frame tight
/// bounding box. In between, the mask is Gaussian-blurred, binarized at a
/// dilating threshold, and clipped to the bounding box, so coarseness grows
/// monotonically from the exact contour to the box.
pub fn degrade_mask(mask: &InstanceMask, p: f64) -> Result<InstanceMask> {
    if !mask.is_binary() {
        return Err(CoreError::invalid("degrade_mask wants a binary mask"));
    }
    let params = degradation_params(p)?;
    if p == 0.0 {
        return Ok(mask.clone());
    }
    let bbox = mask.per_frame_bbox();
    if p >= PRECISION_MAX {
        return Ok(bbox);
    }
    let (t, h, w) = mask.dims();
    let k = gaussian_kernel(params);
    let mut out = InstanceMask::zeros(t, h, w);
    for f in 0..t {
        let blurred = blur_frame(mask.frame(f), h, w, &k);
        let bb = bbox.frame(f);
        let dst = out.frame_mut(f);
        for i in 0..h * w {
            dst[i] = if blurred[i] >= params.threshold && bb[i] > 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Focal loss
// ---------------------------------------------------------------------------

/// Predictions are clamped this far inside (0, 1) before taking logs.
pub const FOCAL_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

/// Class-balanced, hardness-weighted binary cross-entropy, averaged over all
/// cells.
pub fn focal_loss(pred: &LatentMask, target: &LatentMask, fp: FocalParams) -> Result<f64> {
    Ok(focal_loss_grad(pred, target, fp)?.0)
}

/// Focal loss plus its gradient with respect to the (pre-clamp) prediction.
pub fn focal_loss_grad(
    pred: &LatentMask,
    target: &LatentMask,
    fp: FocalParams,
) -> Result<(f64, Tensor)> {
    if pred.data.shape() != target.data.shape() {
        return Err(CoreError::invalid(format!(
            "focal loss shape mismatch: {:?} vs {:?}",
            pred.data.shape(),
            target.data.shape()
        )));
    }
    if !pred.data.all_finite() || !target.data.all_finite() {
        return Err(CoreError::numerical("focal loss saw non-finite input"));
    }
    let n = pred.data.len() as f64;
    let mut grad = Tensor::zeros(pred.data.shape());
    let g = grad.data_mut();
    let (a, gam) = (fp.alpha, fp.gamma);
    let mut total = 0.0;
    for (i, (&m_raw, &y)) in pred.data.data().iter().zip(target.data.data()).enumerate() {
        let clamped = m_raw < FOCAL_CLAMP || m_raw > 1.0 - FOCAL_CLAMP;
        let m = m_raw.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
        let pos = a * y * (1.0 - m).powf(gam);
        let neg = (1.0 - a) * (1.0 - y) * m.powf(gam);
        total += -pos * m.ln() - neg * (1.0 - m).ln();
        if !clamped {
            let dpos = a * y * (gam * (1.0 - m).powf(gam - 1.0) * m.ln() - (1.0 - m).powf(gam) / m);
            let dneg = (1.0 - a)
                * (1.0 - y)
                * (-gam * m.powf(gam - 1.0) * (1.0 - m).ln() + m.powf(gam) / (1.0 - m));
            g[i] = (dpos + dneg) / n;
        }
    }
    Ok((total / n, grad))
}

// ---------------------------------------------------------------------------
// Degradation schedules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Constant,
    Instant,
}

impl std::str::FromStr for ScheduleKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "constant" => Ok(ScheduleKind::Constant),
            "instant" => Ok(ScheduleKind::Instant),
            other => Err(CoreError::invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub p0: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, p0: f64) -> Result<Self> {
        degradation_params(p0)?;
        Ok(Schedule { kind, p0 })
    }

    /// Precision factor fed to the refiner at sampler step `k` of `total`.
    /// Instant drops to `p = 1` after the first step; linear decays toward 0;
    /// constant holds `p0`.
    pub fn p_at(&self, k: usize, total: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.p0,
            ScheduleKind::Linear => self.p0 * (1.0 - k as f64 / total as f64),
            ScheduleKind::Instant => {
                if k == 0 {
                    self.p0
                } else {
                    1.0
                }
            }
        }
    }

    pub fn values(&self, total: usize) -> Vec<f64> {
        (0..total).map(|k| self.p_at(k, total)).collect()
    }
}

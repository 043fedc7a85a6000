//! Flow-matching math: the linear probability path, background-preserving
//! latent composition, the velocity regression loss, and the explicit Euler
//! sampler. The sampler re-applies the composition after every step, so
//! latents outside the editable mask equal the clean input exactly no matter
//! what the model does.

use crate::codec::{LatentGrid, LatentMask};
use crate::error::{CoreError, Result};
use crate::nn::ConditionBundle;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// `t z + (1 - t) eps`: the point of the probability path at time `t`.
pub fn interpolate(z: &LatentGrid, eps: &LatentGrid, t: f64) -> Result<LatentGrid> {
    if z.data.shape() != eps.data.shape() {
        return Err(CoreError::invalid("interpolate wants equal latent shapes"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::invalid(format!("timestep {t} outside [0, 1]")));
    }
    let data = Tensor::from_vec(
        z.data.shape(),
        z.data.data().iter().zip(eps.data.data()).map(|(a, b)| t * a + (1.0 - t) * b).collect(),
    )?;
    Ok(LatentGrid { data, ..*z })
}

/// `z_hat . m + z . (1 - m)` with the mask broadcast over the channel dim:
/// editable cells follow the path, everything else stays pinned to `z`.
pub fn compose(z_hat: &LatentGrid, z: &LatentGrid, m_hat: &LatentMask) -> Result<LatentGrid> {
    let (t, h, w, d) = z.dims();
    if z_hat.data.shape() != z.data.shape() {
        return Err(CoreError::invalid("compose wants equal latent shapes"));
    }
    if m_hat.dims() != (t, h, w) {
        return Err(CoreError::invalid(format!(
            "mask {:?} does not match latent {:?}",
            m_hat.dims(),
            (t, h, w)
        )));
    }
    let mut out = Tensor::zeros(z.data.shape());
    let (a, b, m, o) = (z_hat.data.data(), z.data.data(), m_hat.data.data(), out.data_mut());
    for cell in 0..t * h * w {
        let mv = m[cell];
        let off = cell * d;
        if mv == 0.0 {
            o[off..off + d].copy_from_slice(&b[off..off + d]);
        } else if mv == 1.0 {
            o[off..off + d].copy_from_slice(&a[off..off + d]);
        } else {
            for i in off..off + d {
                o[i] = a[i] * mv + b[i] * (1.0 - mv);
            }
        }
    }
    Ok(LatentGrid { data: out, ..*z })
}

/// The regression target `v = z - eps`.
pub fn fm_target(z: &LatentGrid, eps: &LatentGrid) -> Result<LatentGrid> {
    if z.data.shape() != eps.data.shape() {
        return Err(CoreError::invalid("fm_target wants equal latent shapes"));
    }
    let data = Tensor::from_vec(
        z.data.shape(),
        z.data.data().iter().zip(eps.data.data()).map(|(a, b)| a - b).collect(),
    )?;
    Ok(LatentGrid { data, ..*z })
}

/// Mean squared error over all latent elements. The mask argument is part of
/// the call contract but unused: clean-region cells carry a consistency
/// signal (the path there is constant), so the loss averages everywhere.
pub fn fm_loss(pred: &LatentGrid, target: &LatentGrid, m_hat: Option<&LatentMask>) -> Result<f64> {
    Ok(fm_loss_grad(pred, target, m_hat)?.0)
}

/// Loss plus gradient with respect to the prediction.
pub fn fm_loss_grad(
    pred: &LatentGrid,
    target: &LatentGrid,
    _m_hat: Option<&LatentMask>,
) -> Result<(f64, Tensor)> {
    if pred.data.shape() != target.data.shape() {
        return Err(CoreError::invalid("fm_loss wants equal latent shapes"));
    }
    let n = pred.data.len() as f64;
    let mut grad = Tensor::zeros(pred.data.shape());
    let g = grad.data_mut();
    let mut total = 0.0;
    for (i, (&p, &t)) in pred.data.data().iter().zip(target.data.data()).enumerate() {
        let d = p - t;
        total += d * d;
        g[i] = 2.0 * d / n;
    }
    Ok((total / n, grad))
}

// ---------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------

/// Anything that can estimate the velocity field.
pub trait VelocityField {
    fn velocity(
        &self,
        z_t: &LatentGrid,
        t: f64,
        m_hat: &LatentMask,
        conds: &ConditionBundle,
    ) -> Result<LatentGrid>;
}

/// Supplies the editable mask for each sampler step. The refiner schedule
/// implements this; plain edits use [`FixedMask`].
pub trait MaskProvider {
    /// Mask used for the very first composition (before any model call).
    fn initial_mask(&mut self) -> Result<LatentMask>;
    /// Mask for step `k` at time `t_k`, given the current sampler state.
    /// Must be binary (the sampler pins cells where it is exactly 0).
    fn mask_for_step(&mut self, k: usize, t_k: f64, z_k: &LatentGrid) -> Result<LatentMask>;
}

pub struct FixedMask(pub LatentMask);

impl MaskProvider for FixedMask {
    fn initial_mask(&mut self) -> Result<LatentMask> {
        Ok(self.0.clone())
    }
    fn mask_for_step(&mut self, _k: usize, _t: f64, _z: &LatentGrid) -> Result<LatentMask> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Timestep grid: `steps + 1` increasing values from 0 to 1.
    pub grid: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig::uniform(16)
    }
}

impl SamplerConfig {
    pub fn uniform(steps: usize) -> Self {
        let grid = (0..=steps).map(|k| k as f64 / steps as f64).collect();
        SamplerConfig { grid }
    }

    pub fn steps(&self) -> usize {
        self.grid.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps() < 1 {
            return Err(CoreError::invalid("sampler needs at least one step"));
        }
        if self.grid[0] != 0.0 || *self.grid.last().unwrap() != 1.0 {
            return Err(CoreError::invalid("timestep grid must run from 0 to 1"));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::invalid("timestep grid must be strictly increasing"));
        }
        Ok(())
    }
}

/// Explicit Euler integration of the velocity ODE from t=0 to t=1, with the
/// clean-latent composition re-applied after every step. Masks may change per
/// step (refiner schedules); frames listed in `conds.unmasked_frames` are
/// forced to mask 0 before every composition.
pub fn sample(
    model: &dyn VelocityField,
    z_clean: &LatentGrid,
    eps: &LatentGrid,
    provider: &mut dyn MaskProvider,
    conds: &ConditionBundle,
    cfg: &SamplerConfig,
) -> Result<LatentGrid> {
    cfg.validate()?;
    if z_clean.data.shape() != eps.data.shape() {
        return Err(CoreError::invalid("sample wants matching z and eps shapes"));
    }
    let pin = |m: &mut LatentMask| m.zero_frames(&conds.unmasked_frames);

    let mut m = provider.initial_mask()?;
    pin(&mut m);
    let mut z = compose(eps, z_clean, &m)?;

    let steps = cfg.steps();
    for k in 0..steps {
        let t_k = cfg.grid[k];
        let mut m_k = provider.mask_for_step(k, t_k, &z)?;
        pin(&mut m_k);
        // re-pin under the new mask before evaluating the model
        z = compose(&z, z_clean, &m_k)?;
        let v = model.velocity(&z, t_k, &m_k, conds)?;
        if !v.data.all_finite() {
            return Err(CoreError::numerical(format!(
                "non-finite velocity at sampler step {k} (t={t_k})"
            )));
        }
        let dt = cfg.grid[k + 1] - cfg.grid[k];
        for (zi, vi) in z.data.data_mut().iter_mut().zip(v.data.data()) {
            *zi += dt * vi;
        }
        z = compose(&z, z_clean, &m_k)?;
    }
    Ok(z)
}

//! Networks: the audio-sync editing backbone and the precision-conditioned
//! mask refiner, sharing one parameter set and one block implementation.

pub mod attention;
pub mod backbone;
pub mod block;
pub mod layers;
pub mod params;
pub mod refiner_net;

pub use attention::{AttnGroup, MhAttention};
pub use backbone::{Backbone, BackboneConfig};
pub use params::{Grads, Init, ParamId, ParamSet};
pub use refiner_net::{RefinerConfig, RefinerNet};

use crate::audio::AudioTokens;
use crate::codec::{LatentGrid, LatentMask};
use crate::error::Result;
use crate::flow::VelocityField;
use crate::rng::Stream;
use crate::world::Descriptor;

/// Optional control contexts, already encoded to latent space: scribble and
/// pose add elementwise onto the latent tokens, the reference image rides
/// along as extra tokens and is stripped from the output.
#[derive(Debug, Clone, Default)]
pub struct ControlContexts {
    pub scribble: Option<LatentGrid>,
    pub pose: Option<LatentGrid>,
    pub reference: Option<LatentGrid>,
}

/// Everything the velocity field is conditioned on besides the mask.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub text: Descriptor,
    /// `None` drops the audio pathway entirely (conditioning dropout).
    pub audio: Option<AudioTokens>,
    pub contexts: Option<ControlContexts>,
    /// Frames pinned to the clean input (long-video conditioning); the
    /// sampler forces their mask to zero before every composition.
    pub unmasked_frames: Vec<usize>,
}

impl ConditionBundle {
    pub fn unconditional(_frames: usize, _bands: usize) -> Self {
        ConditionBundle {
            text: Descriptor::empty(),
            audio: None,
            contexts: None,
            unmasked_frames: Vec::new(),
        }
    }
}

/// The joint model: one parameter set holding `backbone.*` and `refiner.*`.
#[derive(Debug, Clone)]
pub struct EditModel {
    pub params: ParamSet,
    pub backbone: Backbone,
    pub refiner: RefinerNet,
}

impl EditModel {
    pub fn new(bb_cfg: &BackboneConfig, rf_cfg: &RefinerConfig, seed: u64) -> Result<EditModel> {
        let mut rng = Stream::new(seed, 0x9a7a);
        let mut params = ParamSet::new();
        let backbone = Backbone::init(&mut params, &mut rng, "backbone", bb_cfg)?;
        let refiner = RefinerNet::init(&mut params, &mut rng, "refiner", rf_cfg)?;
        Ok(EditModel { params, backbone, refiner })
    }

    pub fn count_parameters(&self, prefix: Option<&str>) -> usize {
        self.params.count_parameters(prefix)
    }

    /// Borrow the backbone as a velocity field for the sampler.
    pub fn field(&self) -> ModelField<'_> {
        ModelField { backbone: &self.backbone, params: &self.params }
    }
}

pub struct ModelField<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a ParamSet,
}

impl VelocityField for ModelField<'_> {
    fn velocity(
        &self,
        z_t: &LatentGrid,
        t: f64,
        m_hat: &LatentMask,
        conds: &ConditionBundle,
    ) -> Result<LatentGrid> {
        self.backbone.velocity(self.params, z_t, t, m_hat, conds)
    }
}

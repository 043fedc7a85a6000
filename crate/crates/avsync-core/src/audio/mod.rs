//! Audio: per-frame token features, burst synthesis, spectral-band
//! separation, and the self-feedback curation agent.

pub mod agent;
pub mod feat;
pub mod separate;
pub mod synth;

pub use agent::{
    curate, judge, plan, remix, summarize, AgentPlan, AgentTrace, BandClass, ComponentRegistry,
    GenTrack, Generator, Iteration, SepDomain, Separator, StructuredDescriptor, Verdict,
    DEFAULT_MAX_ITERS, TAU,
};
pub use feat::{encode_audio, AudioTokens};
pub use separate::{band_energy, separate, BandSpec};

//! Desk-scale audio-synchronized video instance editing.
//!
//! Everything here is pure computation: a procedural audio-video world with
//! exact ground truth, an invertible patch codec, flow-matching math with a
//! background-pinning Euler sampler, a small audio-conditioned diffusion
//! transformer plus a precision-conditioned mask refiner (trained jointly),
//! a rule-based audio curation agent, and the evaluation metrics. File
//! formats, checkpoints and the CLI live in the companion `avsync-cli` crate.

pub mod audio;
pub mod codec;
pub mod error;
pub mod fastmath;
pub mod fft;
pub mod flow;
pub mod media;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refiner;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{CoreError, Result};
pub use media::{AudioTrack, InstanceMask, VideoClip};
pub use tensor::Tensor;

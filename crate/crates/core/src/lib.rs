//! Split-step collaborative diffusion sampling.
//!
//! A large denoiser runs the first `k` reverse steps of a trajectory, hands
//! the latent and solver state to a small denoiser that finishes the
//! remaining steps. The small model is derived from the large one by
//! significance-scored structured pruning followed by distillation.
//!
//! Numerical code is generic over [`Scalar`]; the aliases below fix the
//! element type used in practice.

pub mod codec;
pub mod data;
pub mod error;
pub mod flops;
pub mod hybrid;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod pruning;
pub mod sampler;
mod scalar;
pub mod schedule;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Runtime denoiser (32-bit).
pub type Denoiser = nn::DenoiserNetwork<f32>;
/// Denoiser used for gradient checks (64-bit).
pub type Denoiser64 = nn::DenoiserNetwork<f64>;
pub type Latents = sampler::LatentState<f32>;
pub type Codec = codec::LatentCodec<f32>;

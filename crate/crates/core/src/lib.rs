//! Desk-scale laboratory for multi-view diffusion sampling.
//!
//! The crate generates procedural multi-view scenes with a deliberately
//! ambiguous back side, trains a small four-branch noise predictor on them,
//! samples view sets under joint classifier-free guidance or its decomposed
//! two-scale form, and scores the results with image-quality, flow-coherency,
//! and consistency-diversity metrics.
//!
//! All numeric code is generic over the scalar type via [`num::Scalar`]
//! (`f32` or `f64`); the aliases below fix the default working precision.

pub mod denoiser;
pub mod diffusion;
pub mod guidance;
pub mod image;
pub mod num;
pub mod rng;

/// Default working scalar for training, sampling, and stored tensors.
pub type Real = f32;

/// Image in the default working precision.
pub type ImageF = image::Image<Real>;

/// View set in the default working precision.
pub type ViewSetF = image::ViewSet<Real>;

/// Noise schedule in the default working precision.
pub type NoiseScheduleF = diffusion::NoiseSchedule<Real>;

/// Denoiser parameters in the default working precision.
pub type DenoiserParamsF = denoiser::DenoiserParams<Real>;

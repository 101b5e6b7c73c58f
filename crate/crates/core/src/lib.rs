//! Personalized blind face restoration with a guided diffusion prior.
//!
//! A token-conditioned denoiser `G` and a guiding encoder `E` form a blind
//! restoration system. Personalization runs in two stages: the denoiser is
//! fine-tuned inside the system around an identity token with the encoder
//! frozen, then the encoder is retargeted to the frozen personalized
//! denoiser on images of other identities.

pub mod degrade;
pub mod error;
pub mod facegen;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod ops;
pub mod pivot;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use image::Image;

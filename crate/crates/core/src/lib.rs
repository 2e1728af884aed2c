//! Recover the latent vector `z` and the one-hot conditional vector `y` of a
//! conditional GAN from an image, given only the generator.
//!
//! The crate bundles everything needed to run that experiment on a CPU: a
//! small reverse-mode differentiable layer stack ([`diffnet`]), a
//! DCGAN-shaped conditional [`generator`], the projected-gradient
//! [`recovery`] loop with stochastic clipping, a toy conditional-GAN
//! [`trainer`], procedural and IDX [`dataset`]s, evaluation [`metrics`], and
//! the command-line front end in [`cli`].

pub mod cli;
pub mod dataset;
pub mod diffnet;
pub mod error;
pub mod generator;
pub mod imageio;
pub mod metrics;
pub mod recovery;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Anti-purification perturbations for diffusion-based purification.
//!
//! The crate is a small laboratory: a reverse-mode autodiff engine over dense
//! `f64` tensors, a DDPM noise schedule with a toy UNet noise predictor,
//! DiffPure/GrIDPure purification, and a PGD attack that combines the DDPM
//! loss with patch-wise frequency guidance and erroneous-timestep guidance.
//! The workflow module chains perturbation, purification, fine-tuning and
//! sampling and scores the result.

pub mod antipure;
pub mod data;
pub mod dct;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod purification;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod workflow;

#[cfg(test)]
mod testutil;

pub use antipure::{AttackConfig, AttackTrace, LossMask};
pub use denoiser::{Denoiser, DenoiserModel, DenoiserSpec};
pub use diffusion::NoiseSchedule;
pub use error::{Error, Result};
pub use purification::PurifyConfig;
pub use tape::{backward, Tape, Var};
pub use tensor::Tensor;

/// A `[C, H, W]` image with values in `[-1, 1]`.
pub type Image = Tensor;

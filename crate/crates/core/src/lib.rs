//! Training-free, gradient-guided diffusion image editing.
//!
//! Editing intents (move, resize, replace appearance, paste, drag points) are
//! expressed as energies over the correspondence between decoder features of
//! the latent being generated and latents stored during DDIM inversion. The
//! energy gradient is added to the predicted noise during the first gated
//! sampling steps, while every decoder self-attention site reads keys and
//! values from the inversion memory bank.

pub mod attention;
pub mod autograd;
pub mod backend;
pub mod bank;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod image;
pub mod inversion;
pub mod mask;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};

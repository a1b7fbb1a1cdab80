//! Any-level semantic image synthesis at desk scale.
//!
//! Layouts are lists of regions (mask, text, precision level). They are
//! encoded into a precision-gated mask pyramid and a text feature pyramid,
//! which condition a small multi-scale diffusion denoiser sampled under
//! classifier-free guidance.

pub mod error;
pub mod eval;
pub mod features;
pub mod imageio;
pub mod cli;
pub mod diffusion;
pub mod layout;
pub mod sampling;
pub mod scene;
pub mod service;

pub use error::{Error, Result};

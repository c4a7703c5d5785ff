//! EEG-conditioned latent diffusion at desk scale.
//!
//! Latents are laid out `[n, D_z, F_z, S_z]`, conditioning signals
//! `[n, F_y, S_y]` and spectrograms `[n, 1, F_x, S_x]`.

pub mod controlnet;
pub mod datakit;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod latentvae;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};

//! Out-of-distribution detection by diffusion-based reconstruction of
//! multi-layer pooled image features.
//!
//! The pipeline: raw pooled features are Z-score normalized per layer and
//! concatenated ([`features`]), a residual MLP denoiser ([`lfdn`]) is trained
//! to recover them from noised copies ([`trainer`]), and test samples are
//! scored by how well a DDIM-style reconstruction ([`diffusion`]) brings them
//! back ([`scoring`]). [`metrics`] evaluates the scores and [`synth`]
//! generates a small stand-in benchmark.

pub mod diffusion;
pub mod error;
pub mod features;
pub mod lfdn;
pub mod metrics;
pub mod scoring;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

//! Few-shot glyph generation with a content/style disentangled latent
//! diffusion model.
//!
//! Content (a glyph rendered in a canonical style) enters the denoiser by
//! channel concatenation with the noisy latent; style (tokens from a set of
//! reference glyphs) enters only through cross-attention. The crate covers
//! the synthetic corpus, the diffusion arithmetic, the latent codec, the
//! conditional U-Net with its parameter grouping and gradient analysis, the
//! pixel-space background noise removal stage, evaluation metrics, and the
//! training / fine-tuning / generation pipeline.

pub mod backbone;
pub mod bnr;
pub mod classifier;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod glyphdata;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};

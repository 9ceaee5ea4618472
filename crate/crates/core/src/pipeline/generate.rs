use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::standard_normal;
use super::Pipeline;
use crate::bnr::BnrModel;
use crate::error::{ensure, Result};
use crate::glyphdata::{derive_seed, GlyphImage};
use crate::nn;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub seed: u64,
    /// Follow posterior means only; no noise is injected between steps.
    pub mean_path: bool,
    /// Density of dark specks added to each decode before refinement.
    pub speckle: f64,
    /// Samples denoised together.
    pub batch_size: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            mean_path: false,
            speckle: 0.0,
            batch_size: 32,
        }
    }
}

/// Decoder outputs and, when a BNR model was supplied, their refinements.
#[derive(Debug, Clone)]
pub struct Generation {
    pub decoded: Vec<GlyphImage>,
    pub refined: Option<Vec<GlyphImage>>,
}

impl Generation {
    /// Refined images when present, else the decodes.
    pub fn output(&self) -> &[GlyphImage] {
        self.refined.as_deref().unwrap_or(&self.decoded)
    }
}

/// Replaces a `density` fraction of pixels with dark values in `[0, 0.3]`.
pub fn inject_speckle(img: &GlyphImage, density: f64, rng: &mut impl Rng) -> Result<GlyphImage> {
    let px: Vec<f32> = img
        .pixels()
        .iter()
        .map(|&v| {
            if rng.random_bool(density) {
                rng.random_range(0.0..0.3)
            } else {
                v
            }
        })
        .collect();
    GlyphImage::new(img.size(), px, img.char_id, img.style_id)
}

impl Pipeline {
    /// Generates one glyph per source in the style of `refs`.
    ///
    /// Every sample owns a random stream keyed by `(seed, style, char)`, so
    /// results do not depend on how sources are batched.
    pub fn generate(
        &self,
        sources: &[&GlyphImage],
        refs: &[&GlyphImage],
        bnr: Option<&BnrModel>,
        opts: &GenerateOptions,
    ) -> Result<Generation> {
        ensure!(!refs.is_empty(), Validation, "generation needs at least one reference");
        ensure!(!sources.is_empty(), Validation, "no source glyphs to generate from");
        ensure!(opts.batch_size >= 1, Config, "generation batch size must be >= 1");
        ensure!((0.0..=1.0).contains(&opts.speckle), Config, "speckle density must lie in [0, 1]");
        if let Some(m) = bnr {
            m.check_base(&self.config_hash()?)?;
        }
        let style = refs[0].style_id;
        let tokens = self.backbone.style_encode(refs)?;
        let mut decoded = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(opts.batch_size) {
            let mut rngs: Vec<ChaCha8Rng> = chunk
                .iter()
                .map(|s| ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ derive_seed(s.char_id, style)))
                .collect();
            let z = self.sample_latents(chunk, tokens.tensor(), &mut rngs, opts.mean_path)?;
            let ids: Vec<(u32, u32)> = chunk.iter().map(|s| (s.char_id, style)).collect();
            let imgs = nn::tensor_to_images(&self.codec.decode_batch(&z)?, &ids)?;
            for (img, rng) in imgs.into_iter().zip(rngs.iter_mut()) {
                decoded.push(if opts.speckle > 0.0 {
                    inject_speckle(&img, opts.speckle, rng)?
                } else {
                    img
                });
            }
        }
        let refined = match bnr {
            Some(m) => Some(m.refine(&decoded.iter().collect::<Vec<_>>(), sources)?),
            None => None,
        };
        Ok(Generation { decoded, refined })
    }

    /// Strided ancestral sampling from pure noise; `rngs` holds one stream
    /// per source.
    fn sample_latents(
        &self,
        sources: &[&GlyphImage],
        tokens: &Tensor,
        rngs: &mut [ChaCha8Rng],
        mean_path: bool,
    ) -> Result<Tensor> {
        let b = sources.len();
        let [c, h, w] = self.codec.latent_shape();
        let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor> {
            let parts = rngs
                .iter_mut()
                .map(|r| standard_normal(&[1, c, h, w], r))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&parts, 0)?)
        };
        let dt = self.dtype();
        let z_x = self.codec.encode_batch(sources)?.to_dtype(dt)?;
        let (n, d) = tokens.dims2()?;
        let tokens = tokens.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        let mut z = draw(rngs)?.to_dtype(dt)?;
        for (t, prev) in self.schedule().reverse_steps(self.stride())? {
            let z0 = self.backbone.denoise(&z, &z_x, &vec![t; b], &tokens)?;
            if prev == 0 {
                z = z0;
                break;
            }
            let (c0, ct, var) = self.schedule().posterior_coefficients(t, prev)?;
            z = ((z0 * c0)? + (z * ct)?)?;
            if !mean_path && var > 0.0 {
                z = (z + (draw(rngs)?.to_dtype(dt)? * var.sqrt())?)?;
            }
        }
        let z = z.to_dtype(DType::F32)?;
        let total = z.sum_all()?.to_scalar::<f32>()?;
        ensure!(total.is_finite(), Numerical, "sampling diverged (latent sum {total})");
        Ok(z)
    }
}

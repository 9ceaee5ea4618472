//! Latent autoencoder mapping glyph rasters to a compressed latent grid and
//! back, plus an identity mode that keeps diffusion in pixel space.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Conv2d, GroupNorm, VarBuilder};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{LatentArray, Space};
use crate::error::{ensure, Error, Result};
use crate::glyphdata::{Corpus, GlyphImage};
use crate::nn::{self, conv2d, group_norm, Checkpoint, ParamStore, ResBlock, DEVICE};

pub const CHECKPOINT_KIND: &str = "codec";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Learned,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub image_size: usize,
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub mode: CodecMode,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_kl_weight")]
    pub kl_weight: f64,
}

fn default_base_channels() -> usize {
    32
}

fn default_kl_weight() -> f64 {
    1e-6
}

impl CodecConfig {
    pub fn learned(image_size: usize) -> Self {
        Self {
            image_size,
            downsample_factor: 4,
            latent_channels: 4,
            mode: CodecMode::Learned,
            base_channels: default_base_channels(),
            kl_weight: default_kl_weight(),
        }
    }

    pub fn identity(image_size: usize) -> Self {
        Self {
            image_size,
            downsample_factor: 1,
            latent_channels: 1,
            mode: CodecMode::Identity,
            base_channels: default_base_channels(),
            kl_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        ensure!(
            f >= 1 && f.is_power_of_two(),
            Config,
            "downsample factor {f} must be a power of two"
        );
        ensure!(
            self.image_size % f == 0,
            Config,
            "image size {} not divisible by downsample factor {f}",
            self.image_size
        );
        ensure!(self.latent_channels >= 1, Config, "need at least one latent channel");
        if self.mode == CodecMode::Identity {
            ensure!(
                f == 1 && self.latent_channels == 1,
                Config,
                "identity codec requires downsample factor 1 and one latent channel"
            );
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.image_size / self.downsample_factor;
        [self.latent_channels, s, s]
    }

    fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone)]
struct CodecNet {
    enc_in: Conv2d,
    enc_blocks: Vec<(ResBlock, Conv2d)>,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_blocks: Vec<(ResBlock, Conv2d)>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
}

const GROUPS: usize = 8;

impl CodecNet {
    fn new(cfg: &CodecConfig, vb: VarBuilder) -> Result<Self> {
        let stages = cfg.stages();
        let widths: Vec<usize> = (0..=stages)
            .map(|i| cfg.base_channels * (1 << i.min(1)))
            .collect();
        let enc = vb.pp("encoder");
        let enc_in = conv2d(1, widths[0], 3, 1, enc.pp("conv_in"))?;
        let mut enc_blocks = Vec::new();
        for i in 0..stages {
            let b = enc.pp(format!("down.{i}"));
            enc_blocks.push((
                ResBlock::new(widths[i], widths[i + 1], None, GROUPS, b.pp("res"))?,
                conv2d(widths[i + 1], widths[i + 1], 3, 2, b.pp("downsample"))?,
            ));
        }
        let top = widths[stages];
        let enc_norm = group_norm(GROUPS, top, enc.pp("norm_out"))?;
        let enc_out = conv2d(top, 2 * cfg.latent_channels, 3, 1, enc.pp("conv_out"))?;
        let dec = vb.pp("decoder");
        let dec_in = conv2d(cfg.latent_channels, top, 3, 1, dec.pp("conv_in"))?;
        let mut dec_blocks = Vec::new();
        for i in (0..stages).rev() {
            let b = dec.pp(format!("up.{i}"));
            dec_blocks.push((
                ResBlock::new(widths[i + 1], widths[i + 1], None, GROUPS, b.pp("res"))?,
                conv2d(widths[i + 1], widths[i], 3, 1, b.pp("upsample"))?,
            ));
        }
        let dec_norm = group_norm(GROUPS, widths[0], dec.pp("norm_out"))?;
        let dec_out = conv2d(widths[0], 1, 3, 1, dec.pp("conv_out"))?;
        Ok(Self {
            enc_in,
            enc_blocks,
            enc_norm,
            enc_out,
            dec_in,
            dec_blocks,
            dec_norm,
            dec_out,
        })
    }

    /// `(mean, logvar)` of the latent posterior for pixels in `[0, 1]`.
    fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = self.enc_in.forward(&x.affine(2.0, -1.0)?)?;
        for (res, down) in &self.enc_blocks {
            h = down.forward(&res.forward(&h, None)?)?;
        }
        let out = self.enc_out.forward(&self.enc_norm.forward(&h)?.silu()?)?;
        let chunks = out.chunk(2, 1)?;
        Ok((chunks[0].clone(), chunks[1].clamp(-20.0, 10.0)?))
    }

    /// Unclamped pixel estimate.
    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_in.forward(z)?;
        for (res, up) in &self.dec_blocks {
            let h1 = res.forward(&h, None)?;
            let (_, _, hh, ww) = h1.dims4()?;
            h = up.forward(&h1.upsample_nearest2d(hh * 2, ww * 2)?)?;
        }
        let out = self.dec_out.forward(&self.dec_norm.forward(&h)?.silu()?)?;
        Ok(((out + 1.0)? * 0.5)?)
    }
}

/// Encoder/decoder pair with a scalar latent normalization.
#[derive(Clone)]
pub struct Codec {
    config: CodecConfig,
    store: Option<ParamStore>,
    net: Option<CodecNet>,
    scale: f64,
    trained: bool,
}

impl std::fmt::Debug for Codec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Codec")
            .field("config", &self.config)
            .field("scale", &self.scale)
            .field("trained", &self.trained)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Codec {
    pub fn identity(image_size: usize) -> Self {
        Self {
            config: CodecConfig::identity(image_size),
            store: None,
            net: None,
            scale: 1.0,
            trained: true,
        }
    }

    /// Fresh learned codec with seeded, untrained weights.
    pub fn untrained(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.mode == CodecMode::Identity {
            return Ok(Self::identity(config.image_size));
        }
        let store = ParamStore::new(seed, DType::F32);
        let net = CodecNet::new(&config, store.builder())?;
        Ok(Self {
            config,
            store: Some(store),
            net: Some(net),
            scale: 1.0,
            trained: false,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.config.latent_shape()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn ready(&self) -> Result<&CodecNet> {
        ensure!(self.trained, State, "learned codec has not been trained");
        self.net
            .as_ref()
            .ok_or_else(|| Error::Internal("learned codec without network".into()))
    }

    fn check_images(&self, images: &[&GlyphImage]) -> Result<()> {
        ensure!(!images.is_empty(), Validation, "empty image batch");
        for img in images {
            ensure!(
                img.size() == self.config.image_size,
                Validation,
                "image is {}px, codec expects {}",
                img.size(),
                self.config.image_size
            );
        }
        Ok(())
    }

    /// Scaled posterior means, `(B, C, h, w)` in f32.
    pub fn encode_batch(&self, images: &[&GlyphImage]) -> Result<Tensor> {
        self.check_images(images)?;
        let x = nn::images_to_tensor(images, DType::F32)?;
        match self.config.mode {
            CodecMode::Identity => Ok(x),
            CodecMode::Learned => {
                let (mean, _) = self.ready()?.encode(&x)?;
                Ok((mean * self.scale)?.detach())
            }
        }
    }

    pub fn encode(&self, image: &GlyphImage) -> Result<LatentArray> {
        let t = self.encode_batch(&[image])?;
        let mut out = nn::tensor_to_latents(&t, Space::Latent)?;
        Ok(out.remove(0))
    }

    fn check_latent_tensor(&self, z: &Tensor) -> Result<()> {
        let (_, c, h, w) = z.dims4()?;
        ensure!(
            [c, h, w] == self.latent_shape(),
            Validation,
            "latent shape [{c}, {h}, {w}] does not match codec {:?}",
            self.latent_shape()
        );
        Ok(())
    }

    /// Pixels in `[0, 1]` from scaled latents.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent_tensor(z)?;
        let z = z.to_dtype(DType::F32)?;
        let px = match self.config.mode {
            CodecMode::Identity => z,
            CodecMode::Learned => self.ready()?.decode(&(z / self.scale)?)?,
        };
        // NaN never reaches the clamp: the decoder is finite for finite input
        Ok(px.clamp(0.0, 1.0)?)
    }

    pub fn decode(&self, latent: &LatentArray) -> Result<GlyphImage> {
        let t = nn::latents_to_tensor(&[latent], DType::F32)?;
        let px = self.decode_batch(&t)?;
        Ok(nn::tensor_to_images(&px, &[(0, 0)])?.remove(0))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let tensors = match &self.store {
            Some(s) => s.to_blobs()?,
            None => Default::default(),
        };
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::json!({
                "config": self.config,
                "scale": self.scale,
                "trained": self.trained,
            }),
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ensure!(
            ckpt.kind == CHECKPOINT_KIND,
            State,
            "expected a codec checkpoint, found {}",
            ckpt.kind
        );
        let config: CodecConfig = ckpt.meta_field("config")?;
        let mut codec = Self::untrained(config, 0)?;
        if let Some(store) = &codec.store {
            store.load_checkpoint(ckpt)?;
        }
        codec.scale = ckpt.meta_field("scale")?;
        codec.trained = ckpt.meta_field("trained")?;
        Ok(codec)
    }

    /// Raw (unscaled) latent means of the given images.
    fn raw_latent_stats(&self, images: &[&GlyphImage]) -> Result<(f64, f64)> {
        let net = self.net.as_ref().ok_or_else(|| Error::state("identity codec"))?;
        let mut values = Vec::new();
        for chunk in images.chunks(64) {
            let x = nn::images_to_tensor(chunk, DType::F32)?;
            let (mean, _) = net.encode(&x)?;
            values.extend(mean.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Ok((mu, var.sqrt()))
    }

    /// Mean and standard deviation of scaled latents over `images`.
    pub fn latent_stats(&self, images: &[&GlyphImage]) -> Result<(f64, f64)> {
        let (mu, sd) = self.raw_latent_stats(images)?;
        Ok((mu * self.scale, sd * self.scale))
    }
}

/// Images the codec is fitted on: canonical and seen styles over seen chars.
pub fn training_images(corpus: &Corpus) -> Result<Vec<&GlyphImage>> {
    let m = &corpus.manifest;
    let mut styles = vec![m.canonical_style_id];
    styles.extend(&m.splits.seen_styles);
    let mut out = Vec::new();
    for &s in &styles {
        for &c in &m.splits.seen_chars {
            out.push(corpus.image(s, c)?);
        }
    }
    Ok(out)
}

/// Fits a learned codec with reconstruction L1 plus a lightly weighted KL
/// term; returns the codec and per-epoch mean losses.
pub fn train_codec(
    corpus: &Corpus,
    config: &CodecConfig,
    opts: &CodecTrainOptions,
) -> Result<(Codec, Vec<f64>)> {
    ensure!(
        config.mode == CodecMode::Learned,
        State,
        "identity codec has nothing to train"
    );
    ensure!(opts.epochs >= 1 && opts.batch_size >= 1, Config, "epochs and batch size must be >= 1");
    let mut codec = Codec::untrained(config.clone(), opts.seed)?;
    let images = training_images(corpus)?;
    codec.check_images(&images)?;
    let store = codec.store.clone().expect("learned codec store");
    let net = codec.net.clone().expect("learned codec net");
    let mut opt = nn::adam(store.named_vars().into_iter().map(|(_, v)| v).collect(), opts.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xC0DE);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let [lc, lh, lw] = config.latent_shape();
    let mut curve = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&GlyphImage> = chunk.iter().map(|&i| images[i]).collect();
            let x = nn::images_to_tensor(&batch, DType::F32)?;
            let (mean, logvar) = net.encode(&x)?;
            let n = batch.len() * lc * lh * lw;
            let eps: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let eps = Tensor::from_vec(eps, (batch.len(), lc, lh, lw), &DEVICE)?;
            let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
            let recon = net.decode(&z)?;
            let l1 = (recon - &x)?.abs()?.mean_all()?;
            let kl = ((mean.sqr()? + logvar.exp()? - &logvar)? - 1.0)?
                .sum(D::Minus1)?
                .mean_all()?
                .affine(0.5, 0.0)?;
            let loss = (l1 + (kl * config.kl_weight)?)?;
            total += nn::step(&mut opt, &loss, "codec")?;
            batches += 1;
        }
        curve.push(total / batches as f64);
    }
    codec.trained = true;
    let (_, sd) = codec.raw_latent_stats(&images)?;
    ensure!(
        sd.is_finite() && sd > 0.0,
        Numerical,
        "degenerate latent spread {sd}"
    );
    codec.scale = 1.0 / sd;
    Ok((codec, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphdata::{render_corpus, DatasetParams, SplitRatios};

    fn tiny(size: usize) -> CodecConfig {
        CodecConfig {
            base_channels: 8,
            ..CodecConfig::learned(size)
        }
    }

    #[test]
    fn identity_mode_passes_pixels_through() {
        let codec = Codec::identity(32);
        let img = crate::glyphdata::render_glyph(
            &crate::glyphdata::GlyphSpec::generate(1, 1),
            &crate::glyphdata::StyleSpec::canonical(0),
            32,
        )
        .unwrap();
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.shape(), [1, 32, 32]);
        let expected: Vec<f64> = img.pixels().iter().map(|&v| f64::from(v)).collect();
        assert_eq!(z.data(), expected.as_slice());
        let back = codec.decode(&z).unwrap();
        assert_eq!(back.pixels(), img.pixels());
    }

    #[test]
    fn identity_decode_clamps() {
        let codec = Codec::identity(32);
        let z = LatentArray::filled([1, 32, 32], 7.5, Space::Latent);
        assert!(codec.decode(&z).unwrap().pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn learned_shapes_and_state_errors() {
        let codec = Codec::untrained(tiny(64), 0).unwrap();
        let img = GlyphImage::filled(64, 1.0, 0, 0).unwrap();
        assert!(matches!(codec.encode(&img), Err(Error::State(_))));
        assert_eq!(codec.latent_shape(), [4, 16, 16]);
        let mut trained = codec.clone();
        trained.trained = true;
        let z = trained.encode(&img).unwrap();
        assert_eq!(z.shape(), [4, 16, 16]);
        let wrong = GlyphImage::filled(32, 1.0, 0, 0).unwrap();
        assert!(matches!(trained.encode(&wrong), Err(Error::Validation(_))));
        // huge latents stay finite after clamping
        let big = LatentArray::filled([4, 16, 16], 1e6, Space::Latent);
        let out = trained.decode(&big).unwrap();
        assert!(out.pixels().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert_eq!(out.size(), 64);
    }

    #[test]
    fn config_validation() {
        let mut c = CodecConfig::learned(64);
        c.downsample_factor = 3;
        assert!(c.validate().is_err());
        let mut c = CodecConfig::identity(64);
        c.latent_channels = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn short_training_is_finite_and_reproducible() {
        let corpus = render_corpus(&DatasetParams {
            num_chars: 10,
            num_styles: 4,
            size: 32,
            split_ratios: SplitRatios {
                seen_chars: 0.8,
                unseen_chars: 0.2,
                seen_styles: 2.0 / 3.0,
                unseen_styles: 1.0 / 3.0,
            },
            seed: 4,
        })
        .unwrap();
        let opts = CodecTrainOptions {
            epochs: 3,
            batch_size: 8,
            lr: 2e-3,
            seed: 1,
        };
        let (codec, curve) = train_codec(&corpus, &tiny(32), &opts).unwrap();
        assert_eq!(curve.len(), 3);
        assert!(curve.iter().all(|v| v.is_finite()));
        let (_, again) = train_codec(&corpus, &tiny(32), &opts).unwrap();
        assert_eq!(curve, again);
        let ckpt = codec.to_checkpoint().unwrap();
        let back = Codec::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), ckpt.to_bytes().unwrap());
        assert!(matches!(
            train_codec(&corpus, &CodecConfig::identity(32), &opts),
            Err(Error::State(_))
        ));
    }
}

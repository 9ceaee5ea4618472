//! Background noise removal in pixel space: binarization, Sobel edges, a
//! small refinement U-Net and its composite training loss.

use candle_core::{DType, Module, Tensor};
use candle_nn::{Conv2d, GroupNorm, VarBuilder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{ensure, Error, Result};
use crate::glyphdata::GlyphImage;
use crate::nn::{self, conv2d, group_norm, Checkpoint, ParamStore, ResBlock, DEVICE};

pub const CHECKPOINT_KIND: &str = "bnr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnrConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    /// Per-image Otsu threshold instead of the fixed one.
    #[serde(default)]
    pub otsu: bool,
    #[serde(default = "default_width")]
    pub base_width: usize,
}

fn default_threshold() -> f64 {
    0.5
}
fn default_lambda1() -> f64 {
    1.0
}
fn default_lambda2() -> f64 {
    0.05
}
fn default_width() -> usize {
    32
}

impl Default for BnrConfig {
    fn default() -> Self {
        Self {
            threshold: default_threshold(),
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
            otsu: false,
            base_width: default_width(),
        }
    }
}

impl BnrConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            Config,
            "binarization threshold {} outside (0, 1)",
            self.threshold
        );
        ensure!(
            self.lambda1 >= 0.0 && self.lambda2 >= 0.0,
            Config,
            "loss weights must be non-negative"
        );
        ensure!(self.base_width >= 1, Config, "base width must be >= 1");
        Ok(())
    }
}

/// Below `threshold` becomes ink (0); ties and above become background (1).
pub fn binarize(image: &GlyphImage, threshold: f64) -> GlyphImage {
    let th = threshold as f32;
    image
        .map(|v| if v < th { 0.0 } else { 1.0 })
        .expect("binary values are valid pixels")
}

/// Otsu threshold over a 256-bin histogram, as the upper edge of the
/// darker class.
pub fn otsu_threshold(image: &GlyphImage) -> f64 {
    let mut hist = [0f64; 256];
    for &v in image.pixels() {
        hist[((v * 256.0) as usize).min(255)] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * c).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 127usize);
    for (k, &c) in hist.iter().enumerate() {
        w0 += c;
        sum0 += k as f64 * c;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    (best_k + 1) as f64 / 256.0
}

/// Gradient magnitude with replicate-border padding, row-major `n x n`.
pub fn sobel(image: &GlyphImage) -> Vec<f64> {
    let n = image.size();
    let px: Vec<f64> = image.pixels().iter().map(|&v| f64::from(v)).collect();
    sobel_values(&px, n)
}

pub fn sobel_values(px: &[f64], n: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, n as isize - 1) as usize;
        let c = c.clamp(0, n as isize - 1) as usize;
        px[r * n + c]
    };
    let mut out = vec![0.0; n * n];
    for r in 0..n as isize {
        for c in 0..n as isize {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            out[r as usize * n + c as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

fn edge_eps(dtype: DType) -> f64 {
    if dtype == DType::F64 {
        1e-24
    } else {
        1e-12
    }
}

/// Differentiable Sobel magnitude of `(B, 1, H, W)`; a tiny epsilon under the
/// root keeps the gradient finite on flat regions.
pub fn sobel_tensor(x: &Tensor) -> Result<Tensor> {
    let dt = x.dtype();
    let kx = Tensor::new(&[[-1f64, 0., 1.], [-2., 0., 2.], [-1., 0., 1.]], &DEVICE)?;
    let ky = Tensor::new(&[[-1f64, -2., -1.], [0., 0., 0.], [1., 2., 1.]], &DEVICE)?;
    let k = Tensor::stack(&[kx, ky], 0)?.unsqueeze(1)?.to_dtype(dt)?;
    let padded = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let g = padded.conv2d(&k, 0, 1, 1, 1)?;
    Ok((g.sqr()?.sum_keepdim(1)? + edge_eps(dt))?.sqrt()?)
}

#[derive(Debug, Clone)]
struct Net {
    conv_in: Conv2d,
    enc: ResBlock,
    down: Conv2d,
    mid: ResBlock,
    up: Conv2d,
    dec: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Net {
    fn new(w: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv_in: conv2d(2, w, 3, 1, vb.pp("conv_in"))?,
            enc: ResBlock::new(w, w, None, 8, vb.pp("enc"))?,
            down: conv2d(w, 2 * w, 3, 2, vb.pp("down"))?,
            mid: ResBlock::new(2 * w, 2 * w, None, 8, vb.pp("mid"))?,
            up: conv2d(2 * w, w, 3, 1, vb.pp("up"))?,
            dec: ResBlock::new(2 * w, w, None, 8, vb.pp("dec"))?,
            norm_out: group_norm(8, w, vb.pp("norm_out"))?,
            conv_out: conv2d(w, 1, 3, 1, vb.pp("conv_out"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h0 = self.enc.forward(&self.conv_in.forward(&x.affine(2.0, -1.0)?)?, None)?;
        let h1 = self.mid.forward(&self.down.forward(&h0)?, None)?;
        let (_, _, hh, ww) = h1.dims4()?;
        let up = self.up.forward(&h1.upsample_nearest2d(hh * 2, ww * 2)?)?;
        let h = self.dec.forward(&Tensor::cat(&[&up, &h0], 1)?, None)?;
        let out = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        Ok(candle_nn::ops::sigmoid(&out)?)
    }
}

/// Loss components for one batch, each a scalar tensor.
#[derive(Debug, Clone)]
pub struct BnrLoss {
    pub total: Tensor,
    pub l1: Tensor,
    pub edge: Tensor,
    pub perceptual: Option<Tensor>,
}

/// `L1 + λ1·L1(Sobel) + λ2·feature MSE` over `(B, 1, H, W)` tensors.
pub fn bnr_loss(pred: &Tensor, target: &Tensor, cfg: &BnrConfig, features: Option<&Classifier>) -> Result<BnrLoss> {
    let l1 = (pred - target)?.abs()?.mean_all()?;
    let edge = (sobel_tensor(pred)? - sobel_tensor(target)?)?.abs()?.mean_all()?;
    let mut total = (&l1 + (&edge * cfg.lambda1)?)?;
    let mut perceptual = None;
    if cfg.lambda2 > 0.0 {
        let clf = features.ok_or_else(|| Error::state("perceptual loss weight set but no classifier given"))?;
        let fp = clf.features(pred)?.to_dtype(pred.dtype())?;
        let ft = clf.features(target)?.to_dtype(pred.dtype())?.detach();
        let p = (fp - ft)?.sqr()?.mean_all()?;
        total = (total + (&p * cfg.lambda2)?)?;
        perceptual = Some(p);
    }
    Ok(BnrLoss {
        total,
        l1,
        edge,
        perceptual,
    })
}

/// One training example: the decoded estimate, its canonical source and the
/// clean target.
#[derive(Debug, Clone)]
pub struct BnrSample {
    pub decoded: GlyphImage,
    pub source: GlyphImage,
    pub target: GlyphImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnrTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone)]
pub struct BnrModel {
    config: BnrConfig,
    base_hash: String,
    store: ParamStore,
    net: Net,
}

impl std::fmt::Debug for BnrModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BnrModel")
            .field("config", &self.config)
            .field("base_hash", &self.base_hash)
            .finish()
    }
}

impl BnrModel {
    /// Fresh weights bound to the base pipeline identified by `base_hash`.
    pub fn new(config: BnrConfig, base_hash: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, DType::F32);
        let net = Net::new(config.base_width, store.builder())?;
        Ok(Self {
            config,
            base_hash: base_hash.to_string(),
            store,
            net,
        })
    }

    pub fn config(&self) -> &BnrConfig {
        &self.config
    }

    pub fn base_hash(&self) -> &str {
        &self.base_hash
    }

    pub fn check_base(&self, base_hash: &str) -> Result<()> {
        ensure!(
            self.base_hash == base_hash,
            State,
            "BNR weights were trained for base pipeline {}, not {}",
            self.base_hash,
            base_hash
        );
        Ok(())
    }

    fn threshold_for(&self, img: &GlyphImage) -> f64 {
        if self.config.otsu {
            otsu_threshold(img)
        } else {
            self.config.threshold
        }
    }

    /// Binarized decodes concatenated with sources, `(B, 2, H, W)`.
    fn inputs(&self, decoded: &[&GlyphImage], sources: &[&GlyphImage]) -> Result<Tensor> {
        ensure!(
            decoded.len() == sources.len() && !decoded.is_empty(),
            Validation,
            "{} decoded images for {} sources",
            decoded.len(),
            sources.len()
        );
        for (d, s) in decoded.iter().zip(sources) {
            ensure!(d.size() == s.size(), Validation, "decoded {}px vs source {}px", d.size(), s.size());
            ensure!(d.size() % 2 == 0, Validation, "BNR needs an even image size");
        }
        let bin: Vec<GlyphImage> = decoded.iter().map(|d| binarize(d, self.threshold_for(d))).collect();
        let bin = nn::images_to_tensor(&bin.iter().collect::<Vec<_>>(), DType::F32)?;
        let src = nn::images_to_tensor(sources, DType::F32)?;
        Ok(Tensor::cat(&[&bin, &src], 1)?)
    }

    pub fn forward_batch(&self, decoded: &[&GlyphImage], sources: &[&GlyphImage]) -> Result<Tensor> {
        self.net.forward(&self.inputs(decoded, sources)?)
    }

    pub fn refine(&self, decoded: &[&GlyphImage], sources: &[&GlyphImage]) -> Result<Vec<GlyphImage>> {
        let mut out = Vec::with_capacity(decoded.len());
        for (d, s) in decoded.chunks(64).zip(sources.chunks(64)) {
            let y = self.forward_batch(d, s)?;
            let ids: Vec<(u32, u32)> = d.iter().map(|i| (i.char_id, i.style_id)).collect();
            out.extend(nn::tensor_to_images(&y, &ids)?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::json!({ "config": self.config, "base_hash": self.base_hash }),
            tensors: self.store.to_blobs()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ensure!(
            ckpt.kind == CHECKPOINT_KIND,
            State,
            "expected a BNR checkpoint, found {}",
            ckpt.kind
        );
        let base: String = ckpt.meta_field("base_hash")?;
        let m = Self::new(ckpt.meta_field("config")?, &base, 0)?;
        m.store.load_checkpoint(ckpt)?;
        Ok(m)
    }
}

/// Single refinement step on one decoded image.
pub fn bnr_forward(decoded: &GlyphImage, source: &GlyphImage, model: &BnrModel) -> Result<GlyphImage> {
    Ok(model.refine(&[decoded], &[source])?.remove(0))
}

/// Fits the BNR network on prepared samples; returns per-epoch mean losses.
pub fn train_bnr(
    model: &mut BnrModel,
    samples: &[BnrSample],
    features: Option<&Classifier>,
    opts: &BnrTrainOptions,
) -> Result<Vec<f64>> {
    ensure!(!samples.is_empty(), Validation, "no BNR training samples");
    ensure!(opts.epochs >= 1 && opts.batch_size >= 1, Config, "epochs and batch size must be >= 1");
    let vars = model.store.named_vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = nn::adam(vars, opts.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xB4B);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut n) = (0.0, 0usize);
        for chunk in order.chunks(opts.batch_size) {
            let dec: Vec<&GlyphImage> = chunk.iter().map(|&i| &samples[i].decoded).collect();
            let src: Vec<&GlyphImage> = chunk.iter().map(|&i| &samples[i].source).collect();
            let tgt: Vec<&GlyphImage> = chunk.iter().map(|&i| &samples[i].target).collect();
            let pred = model.forward_batch(&dec, &src)?;
            let target = nn::images_to_tensor(&tgt, DType::F32)?;
            let loss = bnr_loss(&pred, &target, &model.config, features)?;
            total += nn::step(&mut opt, &loss.total, "BNR")?;
            n += 1;
        }
        curve.push(total / n as f64);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn img(size: usize, px: Vec<f32>) -> GlyphImage {
        GlyphImage::new(size, px, 0, 0).unwrap()
    }

    fn random_img(size: usize, seed: u64) -> GlyphImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        img(size, (0..size * size).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn binarize_rules() {
        let g = GlyphImage::filled(8, 0.3, 0, 0).unwrap();
        assert!(binarize(&g, 0.5).pixels().iter().all(|&v| v == 0.0));
        let t = GlyphImage::filled(8, 0.5, 0, 0).unwrap();
        assert!(binarize(&t, 0.5).pixels().iter().all(|&v| v == 1.0));
        let r = random_img(16, 1);
        let once = binarize(&r, 0.5);
        assert_eq!(binarize(&once, 0.5), once);
        assert!(once.pixels().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn otsu_splits_bimodal() {
        let px: Vec<f32> = (0..256).map(|i| if i % 3 == 0 { 0.1 } else { 0.9 }).collect();
        let th = otsu_threshold(&img(16, px));
        assert!(th > 0.1 && th <= 0.9, "{th}");
    }

    #[test]
    fn sobel_constant_and_step() {
        let c = GlyphImage::filled(8, 0.4, 0, 0).unwrap();
        assert!(sobel(&c).iter().all(|&v| v == 0.0));
        // 5x5 hand oracle: left two columns 0, right three 1
        let px: Vec<f64> = (0..25).map(|i| if i % 5 >= 2 { 1.0 } else { 0.0 }).collect();
        let e = sobel_values(&px, 5);
        for r in 0..5 {
            let row = &e[r * 5..r * 5 + 5];
            assert_eq!(row, &[0.0, 4.0, 4.0, 0.0, 0.0], "row {r}");
        }
    }

    #[test]
    fn sobel_impulse_stencil() {
        let mut px = vec![0.0; 49];
        px[3 * 7 + 3] = 1.0;
        let e = sobel_values(&px, 7);
        // direct convolution of the two kernels with a unit impulse
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        for dr in 0..3 {
            for dc in 0..3 {
                // response at (3 + 1 - dr, 3 + 1 - dc) sees the impulse under tap (dr, dc)
                let (r, c) = (4 - dr, 4 - dc);
                let expected = f64::hypot(kx[dr][dc], ky[dr][dc]);
                assert!((e[r * 7 + c] - expected).abs() < 1e-12, "({r},{c})");
            }
        }
        let total_support = e.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(total_support, 8);
    }

    #[test]
    fn tensor_sobel_matches_plain() {
        let a = random_img(16, 2);
        let t = nn::images_to_tensor(&[&a], DType::F64).unwrap();
        let s: Vec<f64> = sobel_tensor(&t).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let plain = sobel(&a);
        for (x, y) in s.iter().zip(&plain) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_degenerate_cases() {
        let a = nn::images_to_tensor(&[&random_img(16, 3)], DType::F64).unwrap();
        let b = nn::images_to_tensor(&[&random_img(16, 4)], DType::F64).unwrap();
        let plain = BnrConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..BnrConfig::default()
        };
        let l = bnr_loss(&a, &b, &plain, None).unwrap();
        let expect = (&a - &b).unwrap().abs().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l.total.to_scalar::<f64>().unwrap(), expect);
        let edgy = BnrConfig {
            lambda2: 0.0,
            ..BnrConfig::default()
        };
        assert_eq!(bnr_loss(&a, &a, &edgy, None).unwrap().total.to_scalar::<f64>().unwrap(), 0.0);
        assert!(matches!(bnr_loss(&a, &b, &BnrConfig::default(), None), Err(Error::State(_))));
    }

    #[test]
    fn untrained_forward_is_finite_and_shape_preserving() {
        let m = BnrModel::new(BnrConfig { base_width: 8, ..BnrConfig::default() }, "h", 1).unwrap();
        let d = random_img(32, 5);
        let s = random_img(32, 6);
        let y = bnr_forward(&d, &s, &m).unwrap();
        assert_eq!(y.size(), 32);
        assert!(y.pixels().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(bnr_forward(&d, &random_img(16, 7), &m).is_err());
        let back = BnrModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert!(back.check_base("h").is_ok());
        assert!(matches!(back.check_base("other"), Err(Error::State(_))));
    }

    proptest! {
        #[test]
        fn sobel_ignores_offsets(seed in 0u64..500, c in -0.5f64..0.5) {
            let a = random_img(8, seed);
            let px: Vec<f64> = a.pixels().iter().map(|&v| f64::from(v)).collect();
            let shifted: Vec<f64> = px.iter().map(|v| v + c).collect();
            let e1 = sobel_values(&px, 8);
            let e2 = sobel_values(&shifted, 8);
            for (x, y) in e1.iter().zip(&e2) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn loss_nonnegative_and_zero_only_at_equality(seed in 0u64..200) {
            let a = nn::images_to_tensor(&[&random_img(8, seed)], DType::F64).unwrap();
            let b = nn::images_to_tensor(&[&random_img(8, seed + 1)], DType::F64).unwrap();
            let cfg = BnrConfig { lambda2: 0.0, ..BnrConfig::default() };
            let l = bnr_loss(&a, &b, &cfg, None).unwrap().total.to_scalar::<f64>().unwrap();
            prop_assert!(l > 0.0);
            let z = bnr_loss(&a, &a, &cfg, None).unwrap().total.to_scalar::<f64>().unwrap();
            prop_assert_eq!(z, 0.0);
        }
    }
}

//! Character classifier used for OCR accuracy, as the FID feature extractor
//! and as the perceptual-loss network.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Conv2d, GroupNorm, Linear, VarBuilder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::glyphdata::{CharId, Corpus, GlyphImage};
use crate::nn::{self, conv2d, group_norm, linear, Checkpoint, ParamStore};

pub const CHECKPOINT_KIND: &str = "classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub width: usize,
    pub feature_dim: usize,
}

impl ClassifierConfig {
    pub fn new(image_size: usize) -> Self {
        Self {
            image_size,
            width: 16,
            feature_dim: 64,
        }
    }
}

#[derive(Debug, Clone)]
struct Net {
    blocks: Vec<(Conv2d, GroupNorm)>,
    feature: Linear,
    head: Linear,
}

const BLOCKS: usize = 4;

impl Net {
    fn new(cfg: &ClassifierConfig, classes: usize, vb: VarBuilder) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut cin = 1;
        for i in 0..BLOCKS {
            let cout = cfg.width << i.min(2);
            let b = vb.pp(format!("block.{i}"));
            blocks.push((conv2d(cin, cout, 3, 2, b.pp("conv"))?, group_norm(8, cout, b.pp("norm"))?));
            cin = cout;
        }
        Ok(Self {
            blocks,
            feature: linear(cin, cfg.feature_dim, vb.pp("feature"))?,
            head: linear(cfg.feature_dim, classes, vb.pp("head"))?,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.affine(2.0, -1.0)?;
        for (conv, norm) in &self.blocks {
            h = norm.forward(&conv.forward(&h)?)?.silu()?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.feature.forward(&pooled)?.silu()?)
    }
}

#[derive(Clone)]
pub struct Classifier {
    config: ClassifierConfig,
    classes: Vec<CharId>,
    store: ParamStore,
    net: Net,
}

impl std::fmt::Debug for Classifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Classifier")
            .field("config", &self.config)
            .field("classes", &self.classes.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Classifier {
    pub fn untrained(config: ClassifierConfig, classes: Vec<CharId>, seed: u64) -> Result<Self> {
        ensure!(classes.len() >= 2, Validation, "classifier needs at least two classes");
        let store = ParamStore::new(seed, DType::F32);
        let net = Net::new(&config, classes.len(), store.builder())?;
        Ok(Self {
            config,
            classes,
            store,
            net,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn classes(&self) -> &[CharId] {
        &self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Penultimate features of a `(B, 1, H, W)` pixel tensor; differentiable
    /// with respect to the input.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.net.features(&x.to_dtype(DType::F32)?)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.head.forward(&self.features(x)?)?)
    }

    fn check(&self, images: &[&GlyphImage]) -> Result<()> {
        for img in images {
            ensure!(
                img.size() == self.config.image_size,
                Validation,
                "image is {}px, classifier expects {}",
                img.size(),
                self.config.image_size
            );
        }
        Ok(())
    }

    pub fn feature_vectors(&self, images: &[&GlyphImage]) -> Result<Vec<Vec<f64>>> {
        self.check(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let x = nn::images_to_tensor(chunk, DType::F32)?;
            let f = self.features(&x)?.to_dtype(DType::F64)?;
            out.extend(f.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[&GlyphImage]) -> Result<Vec<CharId>> {
        self.check(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let x = nn::images_to_tensor(chunk, DType::F32)?;
            let idx = self.logits(&x)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
            out.extend(idx.into_iter().map(|i| self.classes[i as usize]));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::json!({ "config": self.config, "classes": self.classes }),
            tensors: self.store.to_blobs()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ensure!(
            ckpt.kind == CHECKPOINT_KIND,
            State,
            "expected a classifier checkpoint, found {}",
            ckpt.kind
        );
        let c = Self::untrained(ckpt.meta_field("config")?, ckpt.meta_field("classes")?, 0)?;
        c.store.load_checkpoint(ckpt)?;
        Ok(c)
    }

    /// Hex sha256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        let bytes = self.to_checkpoint()?.to_bytes()?;
        Ok(nn::hex(&Sha256::digest(&bytes)))
    }
}

/// Canonical and seen-style renders of every char, labelled by char id.
pub fn training_images(corpus: &Corpus) -> Result<Vec<&GlyphImage>> {
    let m = &corpus.manifest;
    let mut styles = vec![m.canonical_style_id];
    styles.extend(&m.splits.seen_styles);
    let mut out = Vec::new();
    for &s in &styles {
        for &c in &m.chars {
            out.push(corpus.image(s, c)?);
        }
    }
    Ok(out)
}

pub fn train_classifier(
    corpus: &Corpus,
    config: &ClassifierConfig,
    opts: &ClassifierTrainOptions,
) -> Result<(Classifier, Vec<f64>)> {
    ensure!(opts.epochs >= 1 && opts.batch_size >= 1, Config, "epochs and batch size must be >= 1");
    let classes = corpus.manifest.chars.clone();
    let clf = Classifier::untrained(config.clone(), classes.clone(), opts.seed)?;
    let images = training_images(corpus)?;
    clf.check(&images)?;
    let label_of = |c: CharId| -> Result<u32> {
        classes
            .iter()
            .position(|&k| k == c)
            .map(|i| i as u32)
            .ok_or_else(|| Error::Internal(format!("char {c} missing from classes")))
    };
    let labels: Vec<u32> = images.iter().map(|i| label_of(i.char_id)).collect::<Result<_>>()?;
    let mut opt = nn::adam(clf.store.named_vars().into_iter().map(|(_, v)| v).collect(), opts.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0C12);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut n) = (0.0, 0usize);
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&GlyphImage> = chunk.iter().map(|&i| images[i]).collect();
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let x = nn::images_to_tensor(&batch, DType::F32)?;
            let y = Tensor::new(y.as_slice(), &nn::DEVICE)?;
            let loss = candle_nn::loss::cross_entropy(&clf.logits(&x)?, &y)?;
            total += nn::step(&mut opt, &loss, "classifier")?;
            n += 1;
        }
        curve.push(total / n as f64);
    }
    Ok((clf, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphdata::{render_corpus, DatasetParams, SplitRatios};

    #[test]
    fn learns_toy_classes() {
        let corpus = render_corpus(&DatasetParams {
            num_chars: 6,
            num_styles: 4,
            size: 32,
            split_ratios: SplitRatios {
                seen_chars: 0.5,
                unseen_chars: 0.5,
                seen_styles: 2.0 / 3.0,
                unseen_styles: 1.0 / 3.0,
            },
            seed: 11,
        })
        .unwrap();
        let opts = ClassifierTrainOptions {
            epochs: 40,
            batch_size: 9,
            lr: 3e-3,
            seed: 2,
        };
        let (clf, curve) = train_classifier(&corpus, &ClassifierConfig::new(32), &opts).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let imgs = training_images(&corpus).unwrap();
        let pred = clf.predict(&imgs).unwrap();
        let acc = pred.iter().zip(&imgs).filter(|(p, i)| **p == i.char_id).count() as f64
            / imgs.len() as f64;
        assert!(acc >= 0.9, "accuracy {acc}");
        let f = clf.feature_vectors(&imgs[..3]).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].len(), 64);
        let back = Classifier::from_checkpoint(&clf.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.predict(&imgs).unwrap(), pred);
        assert_eq!(back.hash().unwrap(), clf.hash().unwrap());
    }
}

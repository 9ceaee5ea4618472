use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::artifacts::LossPoint;
use super::config::{BnrInput, TrainConfig};
use super::generate::{inject_speckle, GenerateOptions};
use super::Pipeline;
use crate::backbone::{Backbone, DenoiseBatch, FreezePlan};
use crate::bnr::{train_bnr, BnrModel, BnrSample, BnrTrainOptions};
use crate::classifier::{train_classifier, Classifier, ClassifierTrainOptions};
use crate::codec::{train_codec, Codec, CodecMode, CodecTrainOptions};
use crate::diffusion::NoiseSchedule;
use crate::error::{ensure, Error, Result};
use crate::glyphdata::{
    derive_seed, enumerate_finetune_pairs, finetune_pair_count, sample_episode_from, CharId, Corpus, Episode,
    GlyphImage, StyleId,
};
use crate::nn::{self, DEVICE};

/// Encoded latents of a fixed image set, gathered by `(style, char)`.
#[derive(Debug, Clone)]
pub struct LatentCache {
    index: HashMap<(StyleId, CharId), usize>,
    latents: Tensor,
}

impl LatentCache {
    pub fn build(codec: &Codec, images: &[&GlyphImage]) -> Result<Self> {
        ensure!(!images.is_empty(), Validation, "nothing to encode");
        let parts = images
            .chunks(64)
            .map(|chunk| codec.encode_batch(chunk))
            .collect::<Result<Vec<_>>>()?;
        let index = images
            .iter()
            .enumerate()
            .map(|(i, img)| ((img.style_id, img.char_id), i))
            .collect();
        Ok(Self {
            index,
            latents: Tensor::cat(&parts, 0)?,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn gather(&self, keys: &[(StyleId, CharId)]) -> Result<Tensor> {
        let idx = keys
            .iter()
            .map(|k| {
                self.index
                    .get(k)
                    .map(|&i| i as u32)
                    .ok_or_else(|| Error::Internal(format!("latent for style {} char {} not cached", k.0, k.1)))
            })
            .collect::<Result<Vec<u32>>>()?;
        Ok(self.latents.index_select(&Tensor::new(idx.as_slice(), &DEVICE)?, 0)?)
    }
}

pub(crate) fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    let n = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &DEVICE)?)
}

fn uniform_timesteps(n: usize, sched: &NoiseSchedule, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=sched.timesteps())).collect()
}

/// Batch over episodes: latents from `cache`, fresh timesteps and noise, and
/// the distinct reference images encoded once.
pub(crate) fn episode_batch(
    cache: &LatentCache,
    canonical: StyleId,
    episodes: &[Episode],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<DenoiseBatch> {
    ensure!(!episodes.is_empty(), Validation, "empty episode batch");
    let n_refs = episodes[0].references.len();
    ensure!(
        episodes.iter().all(|e| e.references.len() == n_refs),
        Validation,
        "episodes in one batch must share a reference count"
    );
    let targets: Vec<_> = episodes.iter().map(|e| (e.target.style_id, e.target.char_id)).collect();
    let sources: Vec<_> = episodes.iter().map(|e| (canonical, e.target.char_id)).collect();
    let z0 = cache.gather(&targets)?;
    let z_x = cache.gather(&sources)?;
    let mut unique: Vec<&GlyphImage> = Vec::new();
    let mut slot: HashMap<(StyleId, CharId), u32> = HashMap::new();
    let mut ref_index = Vec::with_capacity(episodes.len() * n_refs);
    for e in episodes {
        for r in &e.references {
            let i = *slot.entry((r.style_id, r.char_id)).or_insert_with(|| {
                unique.push(r);
                unique.len() as u32 - 1
            });
            ref_index.push(i);
        }
    }
    let t = uniform_timesteps(episodes.len(), sched, rng);
    let noise = standard_normal(z0.dims(), rng)?;
    Ok(DenoiseBatch {
        z0,
        z_x,
        t,
        noise,
        refs: nn::images_to_tensor(&unique, DType::F32)?,
        ref_index,
        n_refs,
    })
}

/// Styles and chars base training draws from.
pub(crate) fn training_pool(corpus: &Corpus, cfg: &TrainConfig) -> Result<(Vec<StyleId>, Vec<CharId>)> {
    let m = &corpus.manifest;
    let styles = cfg.train_styles.clone().unwrap_or_else(|| m.splits.seen_styles.clone());
    let chars = cfg.train_chars.clone().unwrap_or_else(|| m.splits.seen_chars.clone());
    ensure!(!styles.is_empty() && !chars.is_empty(), Validation, "empty training pool");
    for &s in &styles {
        ensure!(
            m.styles.contains(&s) && s != m.canonical_style_id,
            Validation,
            "training style {s} is unknown or canonical"
        );
    }
    for &c in &chars {
        ensure!(m.chars.contains(&c), Validation, "training char {c} is not in the corpus");
    }
    ensure!(
        cfg.n_refs < chars.len(),
        Validation,
        "{} training chars cannot supply {} references besides the target",
        chars.len(),
        cfg.n_refs
    );
    Ok((styles, chars))
}

fn pool_images<'a>(corpus: &'a Corpus, styles: &[StyleId], chars: &[CharId]) -> Result<Vec<&'a GlyphImage>> {
    let canonical = corpus.manifest.canonical_style_id;
    let mut out = Vec::new();
    for &s in std::iter::once(&canonical).chain(styles) {
        for &c in chars {
            out.push(corpus.image(s, c)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BaseTraining {
    pub pipeline: Pipeline,
    pub codec_curve: Vec<f64>,
    pub curve: Vec<LossPoint>,
}

/// Trains the codec (unless it is the identity) and then the denoiser on
/// episodes over the training pool.
pub fn train_base(corpus: &Corpus, cfg: &TrainConfig) -> Result<BaseTraining> {
    cfg.validate()?;
    ensure!(
        corpus.image_size() == cfg.image_size,
        Validation,
        "corpus is {}px but the config asks for {}px",
        corpus.image_size(),
        cfg.image_size
    );
    let (codec, codec_curve) = match cfg.codec.mode {
        CodecMode::Identity => (Codec::identity(cfg.image_size), Vec::new()),
        CodecMode::Learned => {
            log::info!("training codec");
            train_codec(
                corpus,
                &cfg.codec_config(),
                &CodecTrainOptions {
                    epochs: cfg.codec.epochs,
                    batch_size: cfg.codec.batch_size,
                    lr: cfg.codec.lr,
                    seed: cfg.seed,
                },
            )?
        }
    };
    let backbone = Backbone::new(cfg.backbone_config(), cfg.seed, DType::F32)?;
    let pipeline = Pipeline::new(codec, backbone, cfg.schedule_descriptor())?;
    let curve = fit_base(&pipeline, corpus, cfg)?;
    Ok(BaseTraining {
        pipeline,
        codec_curve,
        curve,
    })
}

fn fit_base(p: &Pipeline, corpus: &Corpus, cfg: &TrainConfig) -> Result<Vec<LossPoint>> {
    let (styles, chars) = training_pool(corpus, cfg)?;
    let canonical = corpus.manifest.canonical_style_id;
    let cache = LatentCache::build(&p.codec, &pool_images(corpus, &styles, &chars)?)?;
    let pairs: Vec<(StyleId, CharId)> = styles
        .iter()
        .flat_map(|&s| chars.iter().map(move |&c| (s, c)))
        .collect();
    let vars = p.backbone.store().named_vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = nn::adam(vars, cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let episodes = chunk
                .iter()
                .map(|&i| sample_episode_from(corpus, &chars, pairs[i].0, pairs[i].1, cfg.n_refs, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = episode_batch(&cache, canonical, &episodes, p.schedule(), &mut rng)?;
            let loss = p.backbone.loss(&batch, p.schedule())?;
            let v = nn::step(&mut opt, &loss, &format!("base training step {step}"))?;
            curve.push(LossPoint { step, epoch, loss: v });
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
        }
        log::info!("epoch {epoch}: loss {:.5}", curve.last().map_or(f64::NAN, |p| p.loss));
    }
    Ok(curve)
}

/// Few-shot adaptation on `refs` (N images of one style). Only the groups
/// `plan` marks trainable enter the optimizer; everything else keeps its
/// weights bit for bit. Returns the adapted pipeline and its loss curve.
pub fn finetune(
    p: &Pipeline,
    corpus: &Corpus,
    refs: &[GlyphImage],
    plan: FreezePlan,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Pipeline, Vec<LossPoint>)> {
    let n = refs.len();
    ensure!(
        n >= 2,
        Validation,
        "fine-tuning needs at least 2 references: N = {n} gives N(2^(N-1) - 1) = {} training pairs",
        finetune_pair_count(n)
    );
    let pairs = enumerate_finetune_pairs(refs)?;
    if plan == FreezePlan::No {
        return Ok((p.clone(), Vec::new()));
    }
    let position: HashMap<CharId, u32> = refs.iter().enumerate().map(|(i, r)| (r.char_id, i as u32)).collect();
    let ref_imgs: Vec<&GlyphImage> = refs.iter().collect();
    let sources = refs
        .iter()
        .map(|r| corpus.canonical(r.char_id))
        .collect::<Result<Vec<_>>>()?;
    let z0_all = p.codec.encode_batch(&ref_imgs)?;
    let zx_all = p.codec.encode_batch(&sources)?;
    let refs_px = nn::images_to_tensor(&ref_imgs, DType::F32)?;

    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, pair) in pairs.iter().enumerate() {
        buckets.entry(pair.references.len()).or_default().push(i);
    }

    let model = p.backbone.deep_clone()?;
    let view = model.training_view(plan)?;
    let vars = model.trainable_vars(plan).into_iter().map(|(_, v)| v).collect();
    let mut opt = nn::adam(vars, cfg.finetune_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF1E7);
    let mut curve = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.finetune_epochs {
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for members in buckets.values() {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            batches.extend(m.chunks(cfg.finetune_batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        for chunk in &batches {
            let tgt: Vec<u32> = chunk.iter().map(|&i| position[&pairs[i].target.char_id]).collect();
            let idx = Tensor::new(tgt.as_slice(), &DEVICE)?;
            let ref_index: Vec<u32> = chunk
                .iter()
                .flat_map(|&i| pairs[i].references.iter().map(|r| position[&r.char_id]))
                .collect();
            let z0 = z0_all.index_select(&idx, 0)?;
            let noise = standard_normal(z0.dims(), &mut rng)?;
            let batch = DenoiseBatch {
                z_x: zx_all.index_select(&idx, 0)?,
                t: uniform_timesteps(chunk.len(), p.schedule(), &mut rng),
                noise,
                z0,
                refs: refs_px.clone(),
                ref_index,
                n_refs: pairs[chunk[0]].references.len(),
            };
            let loss = view.loss(&batch, p.schedule())?;
            let v = nn::step(&mut opt, &loss, &format!("fine-tuning ({plan}) step {step}"))?;
            curve.push(LossPoint { step, epoch, loss: v });
            step += 1;
        }
    }
    Ok((p.with_backbone(model)?, curve))
}

pub fn train_classifier_stage(corpus: &Corpus, cfg: &TrainConfig) -> Result<(Classifier, Vec<f64>)> {
    let c = &cfg.classifier;
    train_classifier(
        corpus,
        &cfg.classifier_config(),
        &ClassifierTrainOptions {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            seed: cfg.seed,
        },
    )
}

/// Decoded estimates from the frozen model paired with their sources and
/// clean targets, over the training pool.
pub fn bnr_samples(p: &Pipeline, corpus: &Corpus, cfg: &TrainConfig, seed: u64) -> Result<Vec<BnrSample>> {
    let (styles, chars) = training_pool(corpus, cfg)?;
    let canonical = corpus.manifest.canonical_style_id;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB5A3);
    let mut out = Vec::new();
    match cfg.bnr.input {
        BnrInput::SingleStep => {
            let cache = LatentCache::build(&p.codec, &pool_images(corpus, &styles, &chars)?)?;
            let jobs: Vec<(StyleId, CharId)> = styles
                .iter()
                .flat_map(|&s| chars.iter().map(move |&c| (s, c)))
                .flat_map(|j| std::iter::repeat_n(j, cfg.bnr.samples_per_image))
                .collect();
            for chunk in jobs.chunks(32) {
                let episodes = chunk
                    .iter()
                    .map(|&(s, c)| sample_episode_from(corpus, &chars, s, c, cfg.n_refs, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let batch = episode_batch(&cache, canonical, &episodes, p.schedule(), &mut rng)?;
                let (pred, _) = p.backbone.predict_batch(&batch, p.schedule())?;
                let ids: Vec<(u32, u32)> = chunk.iter().map(|&(s, c)| (c, s)).collect();
                let decoded = nn::tensor_to_images(&p.codec.decode_batch(&pred)?, &ids)?;
                for (e, d) in episodes.into_iter().zip(decoded) {
                    let decoded = if cfg.bnr.speckle > 0.0 {
                        inject_speckle(&d, cfg.bnr.speckle, &mut rng)?
                    } else {
                        d
                    };
                    out.push(BnrSample {
                        decoded,
                        source: e.source,
                        target: e.target,
                    });
                }
            }
        }
        BnrInput::FullSampling => {
            for round in 0..cfg.bnr.samples_per_image {
                for &s in &styles {
                    let picks = rand::seq::index::sample(&mut rng, chars.len(), cfg.n_refs);
                    let ref_chars: Vec<CharId> = picks.iter().map(|i| chars[i]).collect();
                    let refs = ref_chars
                        .iter()
                        .map(|&c| corpus.image(s, c))
                        .collect::<Result<Vec<_>>>()?;
                    let targets: Vec<CharId> = chars.iter().copied().filter(|c| !ref_chars.contains(c)).collect();
                    let sources = targets
                        .iter()
                        .map(|&c| corpus.canonical(c))
                        .collect::<Result<Vec<_>>>()?;
                    let opts = GenerateOptions {
                        seed: seed ^ derive_seed(round as u32, s),
                        mean_path: cfg.mean_path,
                        speckle: cfg.bnr.speckle,
                        ..GenerateOptions::default()
                    };
                    let g = p.generate(&sources, &refs, None, &opts)?;
                    for ((decoded, src), &c) in g.decoded.into_iter().zip(sources).zip(&targets) {
                        out.push(BnrSample {
                            decoded,
                            source: src.clone(),
                            target: corpus.image(s, c)?.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Trains a BNR network against the frozen pipeline `p`.
pub fn train_bnr_stage(
    p: &Pipeline,
    corpus: &Corpus,
    features: Option<&Classifier>,
    cfg: &TrainConfig,
) -> Result<(BnrModel, Vec<f64>)> {
    let mut model = BnrModel::new(cfg.bnr_config(), &p.config_hash()?, cfg.seed)?;
    let samples = bnr_samples(p, corpus, cfg, cfg.seed)?;
    let curve = train_bnr(
        &mut model,
        &samples,
        features,
        &BnrTrainOptions {
            epochs: cfg.bnr.epochs,
            batch_size: cfg.bnr.batch_size,
            lr: cfg.bnr.lr,
            seed: cfg.seed,
        },
    )?;
    Ok((model, curve))
}

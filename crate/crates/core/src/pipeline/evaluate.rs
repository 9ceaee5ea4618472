use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::artifacts::Triptych;
use super::config::TrainConfig;
use super::generate::GenerateOptions;
use super::train::{finetune, standard_normal};
use super::Pipeline;
use crate::backbone::{sensitivity_analysis, DenoiseBatch, FreezePlan, SensitivityReport};
use crate::bnr::BnrModel;
use crate::classifier::Classifier;
use crate::error::{ensure, Error, Result};
use crate::glyphdata::{derive_seed, sample_episode_from, CharId, Corpus, DatasetManifest, GlyphImage, Setting, StyleId};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn;

/// The few-shot reference chars used for `style`: `n` seen chars picked by a
/// stream keyed on `(seed, style)`, returned in ascending order.
pub fn reference_chars(m: &DatasetManifest, style: StyleId, n: usize, seed: u64) -> Result<Vec<CharId>> {
    let pool = &m.splits.seen_chars;
    ensure!(
        n >= 1 && n <= pool.len(),
        Validation,
        "cannot pick {n} references from {} seen chars",
        pool.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ derive_seed(u32::MAX, style));
    let mut picks: Vec<CharId> = rand::seq::index::sample(&mut rng, pool.len(), n)
        .iter()
        .map(|i| pool[i])
        .collect();
    picks.sort_unstable();
    Ok(picks)
}

/// Chars generated for `setting`, excluding the references; at most `max`.
pub fn target_chars(m: &DatasetManifest, setting: Setting, refs: &[CharId], max: Option<usize>) -> Vec<CharId> {
    setting
        .chars(m)
        .iter()
        .copied()
        .filter(|c| !refs.contains(c))
        .take(max.unwrap_or(usize::MAX))
        .collect()
}

/// Which settings, freeze plans and BNR arms an evaluation covers.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan {
    pub settings: Vec<Setting>,
    pub plans: Vec<FreezePlan>,
    pub bnr_arms: Vec<bool>,
}

impl EvalPlan {
    pub fn single(settings: Vec<Setting>, plan: FreezePlan, bnr: bool) -> Self {
        Self {
            settings,
            plans: vec![plan],
            bnr_arms: vec![bnr],
        }
    }

    /// Every freeze plan, with and without BNR.
    pub fn ablation(settings: Vec<Setting>) -> Self {
        Self {
            settings,
            plans: FreezePlan::ALL_PLANS.to_vec(),
            bnr_arms: vec![false, true],
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub setting: Setting,
    pub plan: FreezePlan,
    pub bnr: bool,
    pub report: MetricsReport,
    pub triptychs: Vec<Triptych>,
}

impl EvalRun {
    pub fn label(plan: FreezePlan, bnr: bool) -> String {
        if bnr {
            format!("{plan}+bnr")
        } else {
            plan.to_string()
        }
    }

    /// File stem shared by this run's report, table and grid.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.setting.name().to_lowercase(), Self::label(self.plan, self.bnr))
    }
}

struct Collected {
    decoded: Vec<GlyphImage>,
    refined: Vec<GlyphImage>,
    targets: Vec<GlyphImage>,
    sources: Vec<GlyphImage>,
}

/// Fine-tunes per style and plan, generates every target of every setting
/// and scores each (setting, plan, BNR arm) combination. Decodes are shared
/// between the two BNR arms, which differ only by the post-process.
pub fn run_evaluation(
    p: &Pipeline,
    corpus: &Corpus,
    classifier: Option<&Classifier>,
    bnr: Option<&BnrModel>,
    plan: &EvalPlan,
    cfg: &TrainConfig,
) -> Result<Vec<EvalRun>> {
    ensure!(!plan.settings.is_empty(), Validation, "no evaluation settings given");
    ensure!(
        !plan.plans.is_empty() && !plan.bnr_arms.is_empty(),
        Validation,
        "evaluation needs at least one plan and one BNR arm"
    );
    let want_bnr = plan.bnr_arms.contains(&true);
    ensure!(
        !want_bnr || bnr.is_some(),
        State,
        "a BNR arm was requested but no trained BNR model is available"
    );
    let bnr = if want_bnr { bnr } else { None };
    let m = &corpus.manifest;
    let styles: BTreeSet<StyleId> = plan.settings.iter().flat_map(|s| s.styles(m).iter().copied()).collect();
    let mut runs = Vec::new();
    for &fp in &plan.plans {
        let mut per_setting: BTreeMap<Setting, Collected> = BTreeMap::new();
        for &style in &styles {
            let ref_chars = reference_chars(m, style, cfg.n_refs, cfg.seed)?;
            let refs = ref_chars
                .iter()
                .map(|&c| corpus.image(style, c).cloned())
                .collect::<Result<Vec<_>>>()?;
            let model = if fp == FreezePlan::No {
                p.clone()
            } else {
                log::info!("fine-tuning style {style} with plan {fp}");
                finetune(p, corpus, &refs, fp, cfg, cfg.seed ^ u64::from(style))?.0
            };
            let ref_views: Vec<&GlyphImage> = refs.iter().collect();
            for &setting in &plan.settings {
                if !setting.styles(m).contains(&style) {
                    continue;
                }
                let chars = target_chars(m, setting, &ref_chars, cfg.evaluation.max_chars);
                if chars.is_empty() {
                    continue;
                }
                let sources = chars.iter().map(|&c| corpus.canonical(c)).collect::<Result<Vec<_>>>()?;
                let opts = GenerateOptions {
                    seed: cfg.seed,
                    mean_path: cfg.mean_path,
                    speckle: cfg.evaluation.decode_speckle,
                    ..GenerateOptions::default()
                };
                let g = model.generate(&sources, &ref_views, bnr, &opts)?;
                let entry = per_setting.entry(setting).or_insert_with(|| Collected {
                    decoded: Vec::new(),
                    refined: Vec::new(),
                    targets: Vec::new(),
                    sources: Vec::new(),
                });
                entry.decoded.extend(g.decoded);
                entry.refined.extend(g.refined.unwrap_or_default());
                for (&c, src) in chars.iter().zip(&sources) {
                    entry.targets.push(corpus.image(style, c)?.clone());
                    entry.sources.push((*src).clone());
                }
            }
        }
        for &setting in &plan.settings {
            let c = per_setting
                .get(&setting)
                .ok_or_else(|| Error::validation(format!("setting {setting} has no targets to generate")))?;
            for &arm in &plan.bnr_arms {
                let images = if arm { &c.refined } else { &c.decoded };
                let report = evaluate(
                    images,
                    &c.targets,
                    setting,
                    &EvalRun::label(fp, arm),
                    classifier,
                    &cfg.evaluation.metrics,
                )?;
                let triptychs = images
                    .iter()
                    .zip(&c.targets)
                    .zip(&c.sources)
                    .map(|((g, t), s)| Triptych {
                        generated: g.clone(),
                        target: t.clone(),
                        source: s.clone(),
                    })
                    .collect();
                runs.push(EvalRun {
                    setting,
                    plan: fp,
                    bnr: arm,
                    report,
                    triptychs,
                });
            }
        }
    }
    Ok(runs)
}

pub(crate) const GRADIENT_SETTINGS: [Setting; 3] = [Setting::SCSF, Setting::UCSF, Setting::SCUF];

/// Equal-size batches for the gradient comparison. The settings differ only
/// in which (style, char) pairs they hold: timesteps and noise are shared.
pub fn gradient_batches(
    p: &Pipeline,
    corpus: &Corpus,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BTreeMap<Setting, DenoiseBatch>> {
    let m = &corpus.manifest;
    let b = cfg.evaluation.sensitivity_batch;
    let [lo, hi] = cfg.evaluation.sensitivity_t.unwrap_or([1, p.schedule().timesteps()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6A4D);
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(lo..=hi)).collect();
    let noise = standard_normal(&[&[b][..], &p.codec.latent_shape()[..]].concat(), &mut rng)?;
    let mut out = BTreeMap::new();
    for setting in GRADIENT_SETTINGS {
        let mut pairs: Vec<(StyleId, CharId)> = setting
            .styles(m)
            .iter()
            .flat_map(|&s| setting.chars(m).iter().map(move |&c| (s, c)))
            .collect();
        ensure!(!pairs.is_empty(), Validation, "setting {setting} has no (style, char) pairs");
        pairs.shuffle(&mut rng);
        let mut targets = Vec::with_capacity(b);
        let mut sources = Vec::with_capacity(b);
        let mut refs: Vec<GlyphImage> = Vec::with_capacity(b * cfg.n_refs);
        for i in 0..b {
            let (s, c) = pairs[i % pairs.len()];
            // references always come from the seen chars of the target's style
            let e = sample_episode_from(corpus, &m.splits.seen_chars, s, c, cfg.n_refs, &mut rng)?;
            targets.push(e.target);
            sources.push(e.source);
            refs.extend(e.references);
        }
        let batch = DenoiseBatch {
            z0: p.codec.encode_batch(&targets.iter().collect::<Vec<_>>())?,
            z_x: p.codec.encode_batch(&sources.iter().collect::<Vec<_>>())?,
            t: t.clone(),
            noise: noise.clone(),
            refs: nn::images_to_tensor(&refs.iter().collect::<Vec<_>>(), candle_core::DType::F32)?,
            ref_index: (0..(b * cfg.n_refs) as u32).collect(),
            n_refs: cfg.n_refs,
        };
        out.insert(setting, batch);
    }
    Ok(out)
}

pub fn analyze_gradients(p: &Pipeline, corpus: &Corpus, cfg: &TrainConfig, seed: u64) -> Result<SensitivityReport> {
    let batches = gradient_batches(p, corpus, cfg, seed)?;
    sensitivity_analysis(
        &p.backbone,
        p.schedule(),
        &batches,
        cfg.evaluation.sensitivity_micro_batches,
    )
}


use std::collections::BTreeMap;
use std::sync::OnceLock;

use glyphdiff::backbone::{FreezePlan, ParamGroup, SensitivityReport};
use glyphdiff::bnr::BnrModel;
use glyphdiff::glyphdata::{finetune_pair_count, render_corpus, Corpus, GlyphImage, Setting};
use glyphdiff::pipeline::*;
use glyphdiff::Error;

const TINY: &str = r#"{
    "image_size": 32, "timesteps": 20, "stride": 2, "beta_min": 0.001, "beta_max": 0.2,
    "batch_size": 8, "lr": 1e-3, "epochs": 2, "n_refs": 4, "seed": 11,
    "finetune_epochs": 1, "finetune_lr": 1e-3, "finetune_batch_size": 16,
    "dataset": {"num_chars": 12, "num_styles": 4},
    "codec": {"downsample_factor": 8, "latent_channels": 4, "base_channels": 8, "epochs": 1, "batch_size": 16},
    "model": {"base_width": 8, "channel_mult": [1, 2], "res_blocks": 1, "attn_levels": 1,
              "token_dim": 16, "style_width": 8, "heads": 2, "norm_groups": 4},
    "classifier": {"width": 8, "feature_dim": 16, "epochs": 1},
    "bnr": {"base_width": 8, "epochs": 1},
    "evaluation": {"max_chars": 2, "sensitivity_batch": 8, "sensitivity_micro_batches": 2}
}"#;

struct Fixture {
    cfg: TrainConfig,
    corpus: Corpus,
    trained: BaseTraining,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = TrainConfig::from_json(TINY).unwrap();
        let corpus = render_corpus(&cfg.dataset_params()).unwrap();
        let trained = train_base(&corpus, &cfg).unwrap();
        Fixture { cfg, corpus, trained }
    })
}

fn refs(f: &Fixture, style: u32, n: usize) -> Vec<GlyphImage> {
    f.corpus.manifest.splits.seen_chars[..n]
        .iter()
        .map(|&c| f.corpus.image(style, c).unwrap().clone())
        .collect()
}

fn digests_by_group(p: &Pipeline) -> BTreeMap<ParamGroup, Vec<String>> {
    let d = p.backbone.store().digests().unwrap();
    let mut out: BTreeMap<ParamGroup, Vec<String>> = BTreeMap::new();
    for (name, g) in p.backbone.groups().iter() {
        out.entry(g).or_default().push(d[name].clone());
    }
    out
}

#[test]
fn training_curve_is_finite_and_nonempty() {
    let f = fixture();
    assert!(!f.trained.curve.is_empty());
    assert!(f.trained.curve.iter().all(|p| p.loss.is_finite()));
    assert_eq!(f.trained.curve.last().unwrap().epoch, f.cfg.epochs - 1);
}

#[test]
fn training_is_bit_reproducible() {
    let f = fixture();
    let again = train_base(&f.corpus, &f.cfg).unwrap();
    assert_eq!(again.curve, f.trained.curve);
    assert_eq!(again.codec_curve, f.trained.codec_curve);
    assert_eq!(
        again.pipeline.backbone.store().digests().unwrap(),
        f.trained.pipeline.backbone.store().digests().unwrap()
    );
}

#[test]
fn max_steps_caps_training() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.max_steps = Some(3);
    cfg.codec.mode = glyphdiff::codec::CodecMode::Identity;
    cfg.model.attn_levels = 0;
    let out = train_base(&f.corpus, &cfg).unwrap();
    assert_eq!(out.curve.len(), 3);
}

#[test]
fn finetune_needs_two_references() {
    let f = fixture();
    let err = finetune(&f.trained.pipeline, &f.corpus, &refs(f, 0, 1), FreezePlan::Peft, &f.cfg, 0).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("2^(N-1)"), "{err}");
}

#[test]
fn finetune_with_eight_references_sees_every_pair() {
    let f = fixture();
    assert_eq!(finetune_pair_count(8), 1016);
    let mut cfg = f.cfg.clone();
    cfg.finetune_batch_size = 1016;
    let (_, curve) = finetune(&f.trained.pipeline, &f.corpus, &refs(f, 0, 8), FreezePlan::Clip, &cfg, 3).unwrap();
    // one step per subset-size bucket, sizes 1..=7
    assert_eq!(curve.len(), 7);
    assert!(curve.iter().all(|p| p.loss.is_finite()));
}

#[test]
fn plan_no_leaves_weights_untouched() {
    let f = fixture();
    let p = &f.trained.pipeline;
    let (tuned, curve) = finetune(p, &f.corpus, &refs(f, 0, 4), FreezePlan::No, &f.cfg, 0).unwrap();
    assert!(curve.is_empty());
    assert_eq!(tuned.backbone.store().digests().unwrap(), p.backbone.store().digests().unwrap());
}

#[test]
fn peft_only_moves_style_groups() {
    let f = fixture();
    let p = &f.trained.pipeline;
    let (tuned, _) = finetune(p, &f.corpus, &refs(f, 1, 4), FreezePlan::Peft, &f.cfg, 0).unwrap();
    let before = digests_by_group(p);
    let after = digests_by_group(&tuned);
    assert_eq!(before[&ParamGroup::Others], after[&ParamGroup::Others]);
    for g in [ParamGroup::KV, ParamGroup::StyleProj] {
        assert_ne!(before[&g], after[&g], "{g} did not change");
    }
    // the base model is not modified in place
    assert_eq!(digests_by_group(p), before);
    assert_eq!(tuned.config_hash().unwrap(), p.config_hash().unwrap());
}

#[test]
fn clip_only_moves_style_projection() {
    let f = fixture();
    let p = &f.trained.pipeline;
    let (tuned, _) = finetune(p, &f.corpus, &refs(f, 1, 3), FreezePlan::Clip, &f.cfg, 0).unwrap();
    let before = digests_by_group(p);
    let after = digests_by_group(&tuned);
    for (g, d) in &before {
        if *g == ParamGroup::StyleProj {
            assert_ne!(d, &after[g]);
        } else {
            assert_eq!(d, &after[g], "{g} moved under the clip plan");
        }
    }
}

#[test]
fn checkpoints_round_trip_byte_identical() {
    let f = fixture();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    f.trained.pipeline.save(a.path()).unwrap();
    let loaded = Pipeline::load(a.path()).unwrap();
    loaded.save(b.path()).unwrap();
    for file in [CODEC_FILE, BACKBONE_FILE] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs after a round trip");
    }
    assert_eq!(loaded.config_hash().unwrap(), f.trained.pipeline.config_hash().unwrap());
}

#[test]
fn reloaded_model_gives_the_same_loss() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let p = &f.trained.pipeline;
    p.save(dir.path()).unwrap();
    let q = Pipeline::load(dir.path()).unwrap();
    let batches = gradient_batches(p, &f.corpus, &f.cfg, 5).unwrap();
    for batch in batches.values() {
        let a: f32 = p.backbone.loss(batch, p.schedule()).unwrap().to_scalar().unwrap();
        let b: f32 = q.backbone.loss(batch, q.schedule()).unwrap().to_scalar().unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn mismatched_checkpoints_are_a_state_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    f.trained.pipeline.save(dir.path()).unwrap();
    let mut cfg = f.cfg.clone();
    cfg.codec.epochs = 0;
    cfg.codec.base_channels = 4;
    let other = glyphdiff::codec::Codec::untrained(cfg.codec_config(), 0).unwrap();
    other.to_checkpoint().unwrap().save(&dir.path().join(CODEC_FILE)).unwrap();
    let err = Pipeline::load(dir.path()).unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn missing_checkpoint_is_a_state_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Pipeline::load(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

fn sources(f: &Fixture, n: usize) -> Vec<&GlyphImage> {
    f.corpus.manifest.splits.unseen_chars[..n]
        .iter()
        .map(|&c| f.corpus.canonical(c).unwrap())
        .collect()
}

#[test]
fn generation_is_deterministic_per_seed() {
    let f = fixture();
    let p = &f.trained.pipeline;
    let r = refs(f, 2, 4);
    let rv: Vec<&GlyphImage> = r.iter().collect();
    let opts = GenerateOptions {
        seed: 9,
        ..GenerateOptions::default()
    };
    let a = p.generate(&sources(f, 2), &rv, None, &opts).unwrap();
    let b = p.generate(&sources(f, 2), &rv, None, &opts).unwrap();
    assert_eq!(a.decoded, b.decoded);
    let c = p
        .generate(&sources(f, 2), &rv, None, &GenerateOptions { seed: 10, ..opts.clone() })
        .unwrap();
    assert_ne!(a.decoded, c.decoded);
    // each output depends only on its own (char, style) stream
    let one = p.generate(&sources(f, 1), &rv, None, &opts).unwrap();
    assert_eq!(one.decoded[0], a.decoded[0]);
}

#[test]
fn reference_order_does_not_matter() {
    let f = fixture();
    let p = &f.trained.pipeline;
    let r = refs(f, 2, 4);
    let fwd: Vec<&GlyphImage> = r.iter().collect();
    let rev: Vec<&GlyphImage> = r.iter().rev().collect();
    let opts = GenerateOptions::default();
    let a = p.generate(&sources(f, 2), &fwd, None, &opts).unwrap();
    let b = p.generate(&sources(f, 2), &rev, None, &opts).unwrap();
    for (x, y) in a.decoded.iter().zip(&b.decoded) {
        let d = x.pixels().iter().zip(y.pixels()).map(|(u, v)| (u - v).abs()).fold(0.0f32, f32::max);
        assert!(d <= 1e-5, "permuted references moved a pixel by {d}");
    }
}

#[test]
fn disabled_bnr_returns_the_decode() {
    let f = fixture();
    let p = &f.trained.pipeline;
    let r = refs(f, 2, 4);
    let rv: Vec<&GlyphImage> = r.iter().collect();
    let g = p.generate(&sources(f, 2), &rv, None, &GenerateOptions::default()).unwrap();
    assert!(g.refined.is_none());
    assert_eq!(g.output(), &g.decoded[..]);

    let bnr = BnrModel::new(f.cfg.bnr_config(), &p.config_hash().unwrap(), 0).unwrap();
    let h = p.generate(&sources(f, 2), &rv, Some(&bnr), &GenerateOptions::default()).unwrap();
    assert_eq!(h.decoded, g.decoded);
    assert_eq!(h.refined.as_ref().unwrap().len(), 2);

    let stranger = BnrModel::new(f.cfg.bnr_config(), "not-this-model", 0).unwrap();
    let err = p.generate(&sources(f, 1), &rv, Some(&stranger), &GenerateOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn ablation_yields_ten_reports_per_setting() {
    let f = fixture();
    let p = &f.trained.pipeline;
    let bnr = BnrModel::new(f.cfg.bnr_config(), &p.config_hash().unwrap(), 0).unwrap();
    let runs = run_evaluation(p, &f.corpus, None, Some(&bnr), &EvalPlan::ablation(vec![Setting::UCUF]), &f.cfg).unwrap();
    assert_eq!(runs.len(), 10);
    let labels: std::collections::BTreeSet<String> = runs.iter().map(|r| r.report.label.clone()).collect();
    assert_eq!(labels.len(), 10);
    assert!(labels.contains("peft+bnr") && labels.contains("no"));
    for r in &runs {
        assert_eq!(r.report.setting, Setting::UCUF);
        assert_eq!(r.triptychs.len(), r.report.aggregate.count);
        assert!(r.report.aggregate.count > 0);
    }
}

#[test]
fn evaluation_rejects_empty_settings_and_missing_bnr() {
    let f = fixture();
    let p = &f.trained.pipeline;
    let err = run_evaluation(p, &f.corpus, None, None, &EvalPlan::single(vec![], FreezePlan::No, false), &f.cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = run_evaluation(
        p,
        &f.corpus,
        None,
        None,
        &EvalPlan::single(vec![Setting::SCUF], FreezePlan::No, true),
        &f.cfg,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn sensitivity_report_round_trips() {
    let f = fixture();
    let report = analyze_gradients(&f.trained.pipeline, &f.corpus, &f.cfg, 1).unwrap();
    assert_eq!(report.ratios.len(), 3);
    for g in ParamGroup::ALL {
        assert!((report.ratios[&Setting::SCSF][&g] - 1.0).abs() < 1e-12);
    }
    let back = SensitivityReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    let again = analyze_gradients(&f.trained.pipeline, &f.corpus, &f.cfg, 1).unwrap();
    assert_eq!(again, report);
}

#[test]
fn bnr_stage_trains_against_the_frozen_model() {
    let f = fixture();
    let err = train_bnr_stage(&f.trained.pipeline, &f.corpus, None, &f.cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    let mut cfg = f.cfg.clone();
    cfg.bnr.lambda2 = 0.0;
    let (model, curve) = train_bnr_stage(&f.trained.pipeline, &f.corpus, None, &cfg).unwrap();
    assert_eq!(curve.len(), cfg.bnr.epochs);
    assert!(curve.iter().all(|v| v.is_finite()));
    model.check_base(&f.trained.pipeline.config_hash().unwrap()).unwrap();
}

use super::*;
use crate::diffusion::make_schedule;
use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        base_width: 16,
        channel_mult: vec![1, 2],
        res_blocks: 1,
        attn_levels: 1,
        token_dim: 16,
        style_width: 8,
        ..BackboneConfig::new(2, 8, 32)
    }
}

fn randn(shape: &[usize], rng: &mut impl Rng, dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(v, shape, &DEVICE).unwrap().to_dtype(dtype).unwrap()
}

fn rand_refs(n: usize, rng: &mut impl Rng) -> Tensor {
    let v: Vec<f32> = (0..n * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(v, (n, 1, 32, 32), &DEVICE).unwrap()
}

fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    let a = a.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let b = b.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn partition_is_total_and_deterministic() {
    let m = Backbone::new(tiny_config(), 0, DType::F32).unwrap();
    let counts = m.group_param_counts();
    assert_eq!(counts.values().sum::<usize>(), m.store().num_parameters());
    assert_eq!(m.groups().len(), m.store().named_vars().len());
    assert_eq!(partition_parameters(m.store()).unwrap(), *m.groups());
    assert!(counts.values().all(|&c| c > 0));
}

#[test]
fn default_config_group_sizes_follow_table_order() {
    let m = Backbone::new(BackboneConfig::new(4, 16, 64), 0, DType::F32).unwrap();
    let c = m.group_param_counts();
    let (kv, tb, other) = (c[&ParamGroup::KV], c[&ParamGroup::TransBlock], c[&ParamGroup::Others]);
    assert!(kv < tb && tb < other, "KV {kv} TransBlock {tb} Others {other}");
}

#[test]
fn no_cross_attention_means_no_kv() {
    let cfg = BackboneConfig {
        cross_attention: false,
        ..tiny_config()
    };
    let m = Backbone::new(cfg, 0, DType::F32).unwrap();
    let base = Backbone::new(tiny_config(), 0, DType::F32).unwrap();
    assert!(m.groups().names_in(ParamGroup::KV).is_empty());
    for (name, g) in m.groups().iter() {
        assert_eq!(base.groups().group_of(name), Some(g));
    }
}

#[test]
fn denoise_shape_and_permutation_invariance() {
    let m = Backbone::new(tiny_config(), 3, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z_t = randn(&[2, 2, 8, 8], &mut rng, DType::F32);
    let z_x = randn(&[2, 2, 8, 8], &mut rng, DType::F32);
    let tokens = m.style_tokens(&rand_refs(10, &mut rng)).unwrap().reshape((2, 5, 16)).unwrap();
    let out = m.denoise(&z_t, &z_x, &[3, 70], &tokens).unwrap();
    assert_eq!(out.dims(), z_t.dims());
    let perm = Tensor::new(&[3u32, 0, 4, 1, 2], &DEVICE).unwrap();
    let permuted = tokens.index_select(&perm, 1).unwrap();
    let again = m.denoise(&z_t, &z_x, &[3, 70], &permuted).unwrap();
    assert!(max_rel(&out, &again) < 1e-5);
    assert!(m.denoise(&z_t, &z_x.narrow(2, 0, 4).unwrap(), &[1, 1], &tokens).is_err());
}

#[test]
fn style_tokens_are_per_image() {
    let m = Backbone::new(tiny_config(), 4, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let refs = rand_refs(3, &mut rng);
    let tok = m.style_tokens(&refs).unwrap();
    let first = refs.narrow(0, 0, 1).unwrap();
    let twice = m.style_tokens(&Tensor::cat(&[&first, &first], 0).unwrap()).unwrap();
    let rows: Vec<Vec<f32>> = twice.to_vec2().unwrap();
    assert_eq!(rows[0], rows[1]);
    let alone: Vec<Vec<f32>> = m.style_tokens(&first).unwrap().to_vec2().unwrap();
    let all: Vec<Vec<f32>> = tok.to_vec2().unwrap();
    assert!(alone[0].iter().zip(&all[0]).all(|(a, b)| (a - b).abs() < 1e-6));
    let st = StyleTokens::new(tok).unwrap();
    let p = st.permuted(&[2, 0, 1]).unwrap().rows().unwrap();
    assert_eq!(p[0], st.rows().unwrap()[2]);
}

#[test]
fn style_encode_rejects_empty() {
    let m = Backbone::new(tiny_config(), 4, DType::F32).unwrap();
    assert!(matches!(m.style_encode(&[]), Err(crate::Error::Validation(_))));
}

#[test]
fn checkpoint_round_trip() {
    let m = Backbone::new(tiny_config(), 5, DType::F32).unwrap();
    let bytes = m.to_checkpoint().unwrap().to_bytes().unwrap();
    let back = Backbone::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
}

fn tiny_batch(seed: u64, n: usize) -> DenoiseBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenoiseBatch {
        z0: randn(&[n, 2, 8, 8], &mut rng, DType::F32),
        z_x: randn(&[n, 2, 8, 8], &mut rng, DType::F32),
        t: (0..n).map(|_| rng.random_range(1..=20)).collect(),
        noise: randn(&[n, 2, 8, 8], &mut rng, DType::F32),
        refs: rand_refs(n * 2, &mut rng),
        ref_index: (0..(n * 2) as u32).collect(),
        n_refs: 2,
    }
}

#[test]
fn sensitivity_baseline_and_identical_batches() {
    let m = Backbone::new(tiny_config(), 6, DType::F64).unwrap();
    let sched = make_schedule(20, 1e-4, 0.02).unwrap();
    let b = tiny_batch(1, 4);
    let mut batches = BTreeMap::new();
    batches.insert(crate::glyphdata::Setting::SCSF, b.clone());
    batches.insert(crate::glyphdata::Setting::SCUF, b.clone());
    batches.insert(crate::glyphdata::Setting::UCSF, tiny_batch(2, 4));
    let rep = sensitivity_analysis(&m, &sched, &batches, 2).unwrap();
    for (_, r) in &rep.ratios[&crate::glyphdata::Setting::SCSF] {
        assert_eq!(*r, 1.0);
    }
    for (_, r) in &rep.ratios[&crate::glyphdata::Setting::SCUF] {
        assert!((r - 1.0).abs() < 1e-9, "{r}");
    }
    assert!(rep.ratios[&crate::glyphdata::Setting::UCSF].values().all(|r| r.is_finite() && *r > 0.0));
    // accumulation across micro-batches matches one full pass
    let one = sensitivity_analysis(&m, &sched, &batches, 1).unwrap();
    let top = one.norms[&crate::glyphdata::Setting::UCSF].values().fold(0.0f64, |m, &v| m.max(v));
    for (name, g) in &one.norms[&crate::glyphdata::Setting::UCSF] {
        let g2 = rep.norms[&crate::glyphdata::Setting::UCSF][name];
        assert!((g - g2).abs() <= 1e-9 * top, "{name}: {g} vs {g2}");
    }
    let back = SensitivityReport::from_json(&rep.to_json().unwrap()).unwrap();
    assert_eq!(back, rep);
}

#[test]
fn sensitivity_requires_baseline() {
    let m = Backbone::new(tiny_config(), 6, DType::F32).unwrap();
    let sched = make_schedule(20, 1e-4, 0.02).unwrap();
    let mut batches = BTreeMap::new();
    batches.insert(crate::glyphdata::Setting::SCUF, tiny_batch(1, 2));
    assert!(matches!(sensitivity_analysis(&m, &sched, &batches, 1), Err(crate::Error::Validation(_))));
}

#[test]
fn training_view_shares_weights_and_blocks_frozen_grads() {
    let m = Backbone::new(tiny_config(), 7, DType::F32).unwrap();
    let view = m.training_view(FreezePlan::Peft).unwrap();
    let sched = make_schedule(20, 1e-4, 0.02).unwrap();
    let b = tiny_batch(3, 2);
    let full = m.loss(&b, &sched).unwrap().to_scalar::<f32>().unwrap();
    let viewed = view.loss(&b, &sched).unwrap();
    assert_eq!(viewed.to_scalar::<f32>().unwrap(), full);
    let grads = viewed.backward().unwrap();
    for (name, var) in m.store().named_vars() {
        let g = m.groups().group_of(&name).unwrap();
        assert_eq!(grads.get(var.as_tensor()).is_some(), g.is_style(), "{name}");
    }
    // updates through the shared variables are visible to the view
    let (name, var) = m.trainable_vars(FreezePlan::Peft).remove(0);
    var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
    let after = view.loss(&b, &sched).unwrap().to_scalar::<f32>().unwrap();
    assert_ne!(after, full, "{name}");
}

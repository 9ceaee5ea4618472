use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use glyphdiff::glyphdata::{render_corpus, DatasetParams, GlyphImage, Setting};
use glyphdiff::metrics::{evaluate, MetricsConfig};
use glyphdiff::par;

fn params() -> DatasetParams {
    DatasetParams {
        num_chars: 24,
        num_styles: 4,
        size: 64,
        split_ratios: Default::default(),
        seed: 0,
    }
}

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", true), ("parallel", false)]
}

fn rendering(c: &mut Criterion) {
    let mut g = c.benchmark_group("render_corpus");
    g.sample_size(10);
    for (name, sequential) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_deterministic(sequential);
            b.iter(|| render_corpus(&params()).unwrap());
        });
    }
    par::set_deterministic(false);
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let corpus = render_corpus(&params()).unwrap();
    let m = &corpus.manifest;
    let pairs: Vec<(GlyphImage, GlyphImage)> = m
        .chars
        .iter()
        .flat_map(|&ch| {
            let a = corpus.image(m.styles[1], ch).unwrap().clone();
            let b = corpus.image(m.styles[2], ch).unwrap().clone();
            [(a.clone(), b.clone()), (b, a)]
        })
        .collect();
    let (gen, tgt): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let cfg = MetricsConfig::default();
    let mut g = c.benchmark_group("metrics_evaluate");
    for (name, sequential) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_deterministic(sequential);
            b.iter(|| evaluate(&gen, &tgt, Setting::UCUF, "bench", None, &cfg).unwrap());
        });
    }
    par::set_deterministic(false);
    g.finish();
}

criterion_group!(benches, rendering, metrics);
criterion_main!(benches);

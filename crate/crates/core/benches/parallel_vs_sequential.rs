//! One-thread pool vs. the default pool on the data-parallel stages.
//!
//! `cargo bench -p std-engine` compares pool sizes; adding
//! `--no-default-features` benches the build without rayon.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPool;
use std_engine::alignment::Corpus;
use std_engine::clustering::{kmeans_fit, KMeansConfig, Pooling, VectorSet};
use std_engine::lexicon_metrics::{ned_coverage, NedOptions};
use std_engine::pipeline::{pool_corpus, segment_corpus, PooledCorpus};
use std_engine::segmenter::SegmenterConfig;
use std_engine::synth::{generate_corpus, SynthSpec};

fn corpus() -> Corpus {
    let spec = SynthSpec {
        n_utterances: 400,
        vocab_size: 40,
        noise_floor: 0.2,
        peak_mass: 0.8,
        cluster_sigma: 1.0,
        feature_dim: 64,
        seed: 1,
        ..SynthSpec::default()
    };
    generate_corpus(&spec).unwrap().corpus().unwrap()
}

fn pools() -> Vec<(String, ThreadPool)> {
    let mut out = vec![(
        "1".to_string(),
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap(),
    )];
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    if n > 1 {
        out.push((
            n.to_string(),
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap(),
        ));
    }
    out
}

fn pooled(corpus: &Corpus) -> PooledCorpus {
    let seg = SegmenterConfig {
        retain_mass: 0.8,
        ..SegmenterConfig::default()
    };
    let results = segment_corpus(corpus, &seg).unwrap();
    pool_corpus(corpus, &results, seg.layer, Pooling::Mean).unwrap()
}

fn bench(c: &mut Criterion) {
    let corpus = corpus();
    let pooled = pooled(&corpus);
    let rows: Vec<Vec<f32>> = pooled.segments.iter().map(|s| s.vector.clone()).collect();
    let data = VectorSet::from_rows(&rows).unwrap();
    let labels: Vec<usize> = (0..pooled.len()).map(|i| i % 40).collect();
    let fragments = pooled.fragments_with(&labels);
    let seg = SegmenterConfig {
        retain_mass: 0.8,
        ..SegmenterConfig::default()
    };

    let mut group = c.benchmark_group("threads");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("segment", &name), &pool, |b, pool| {
            b.iter(|| pool.install(|| black_box(segment_corpus(&corpus, &seg).unwrap())))
        });
        group.bench_with_input(BenchmarkId::new("kmeans", &name), &pool, |b, pool| {
            let cfg = KMeansConfig {
                max_iter: 20,
                ..KMeansConfig::new(64, 0)
            };
            b.iter(|| pool.install(|| black_box(kmeans_fit(&data, &cfg).unwrap())))
        });
        group.bench_with_input(BenchmarkId::new("ned", &name), &pool, |b, pool| {
            let alignments: Vec<_> = corpus.utterances().iter().map(|u| &u.alignment).collect();
            b.iter(|| {
                pool.install(|| {
                    black_box(
                        ned_coverage(
                            &fragments,
                            alignments.iter().copied(),
                            &NedOptions::default(),
                        )
                        .unwrap(),
                    )
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);

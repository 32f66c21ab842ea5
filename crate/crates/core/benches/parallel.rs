//! Sequential vs rayon execution of the data-parallel kernels.
//!
//! `cargo bench --bench parallel`; build with `--no-default-features` to
//! measure the sequential-only binary.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use blocksel::data::{load_dataset, DatasetSource, DatasetSpec, Normalization, Split};
use blocksel::model::{efficientnet_b0, toy_model};
use blocksel::otdd::{class_moments, pairwise_cost, solve_sinkhorn, LabeledFeatureSet};
use blocksel::par;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn features(n: usize, dim: usize, seed: u64) -> LabeledFeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    LabeledFeatureSet::new(f, dim, (0..n).map(|i| i % 5).collect()).unwrap()
}

fn spec(image: usize) -> DatasetSpec {
    DatasetSpec {
        name: "bench".into(),
        source: DatasetSource::Synthetic {
            per_class: 64,
            pattern_offset: 0,
            noise: 0.08,
            seed: 1,
            native_size: 64,
        },
        num_classes: 3,
        image_size: (image, image),
        val_fraction: 0.1,
        test_fraction: 0.1,
        normalization: Normalization::Imagenet,
        augment_flip: false,
    }
}

fn bench_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    g.sample_size(10);
    let ds = load_dataset(&spec(32), Split::Train, 0).unwrap();
    let idx: Vec<usize> = (0..32).collect();
    let x = ds.batch(&idx, None).x;
    let toy = toy_model(3, (32, 32), 0);
    let big_ds = load_dataset(&spec(96), Split::Train, 0).unwrap();
    let big_x = big_ds.batch(&idx[..8], None).x;
    let big = efficientnet_b0(3, (96, 96), 0);
    for (name, on) in MODES {
        let mut net = toy.network().clone();
        g.bench_function(BenchmarkId::new("toy_b32", name), |b| {
            b.iter(|| par::with_mode(on, || black_box(net.predict(&x))))
        });
        let mut net = big.network().clone();
        g.bench_function(BenchmarkId::new("efficientnet_b8_96px", name), |b| {
            b.iter(|| par::with_mode(on, || black_box(net.predict(&big_x))))
        });
    }
    g.finish();
}

fn bench_otdd(c: &mut Criterion) {
    let mut g = c.benchmark_group("otdd");
    g.sample_size(10);
    let a = features(400, 64, 1);
    let b = features(400, 64, 2);
    let ma = class_moments(&a, 1e-6).unwrap();
    let mb = class_moments(&b, 1e-6).unwrap();
    let cost = pairwise_cost(&a, &b, &ma, &mb).unwrap();
    let u = vec![1.0 / 400.0; 400];
    for (name, on) in MODES {
        g.bench_function(BenchmarkId::new("pairwise_cost_400x400x64", name), |bch| {
            bch.iter(|| par::with_mode(on, || black_box(pairwise_cost(&a, &b, &ma, &mb).unwrap())))
        });
        g.bench_function(BenchmarkId::new("sinkhorn_400_reg1", name), |bch| {
            bch.iter(|| par::with_mode(on, || black_box(solve_sinkhorn(&cost, &u, &u, 1.0, 200, 1e-12).unwrap())))
        });
    }
    g.finish();
}

fn bench_loading(c: &mut Criterion) {
    let mut g = c.benchmark_group("loading");
    g.sample_size(10);
    let ds = load_dataset(&spec(128), Split::Train, 0).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    for (name, on) in MODES {
        g.bench_function(BenchmarkId::new("batch64_128px", name), |b| {
            b.iter(|| par::with_mode(on, || black_box(ds.batch(&idx, None))))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_forward, bench_otdd, bench_loading);
criterion_main!(benches);

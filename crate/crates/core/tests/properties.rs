use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use blocksel::data::{load_splits, stratified_draws, DatasetSource, DatasetSpec, Normalization};
use blocksel::ga::Genotype;
use blocksel::harness::spearman;
use blocksel::model::{efficientnet_b0, toy_model};
use blocksel::nn::StageKind;
use blocksel::otdd::{
    class_moments, gaussian_w2, otdd, solve_exact, solve_sinkhorn, CostMatrix, LabeledFeatureSet, OtddConfig,
};
use blocksel::trainer::{fine_tune, TrainConfig};

fn feature_set(n: usize, dim: usize, classes: usize, seed: u64) -> LabeledFeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            f.push(z + if d == c % dim { 1.5 } else { 0.0 });
        }
    }
    LabeledFeatureSet::new(f, dim, labels).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    permutations(n - 1)
        .into_iter()
        .flat_map(|p| {
            (0..=p.len()).map(move |k| {
                let mut q = p.clone();
                q.insert(k, n - 1);
                q
            })
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exact_matches_brute_force(n in 1usize..=6, values in proptest::collection::vec(0.0f64..10.0, 36)) {
        let c = CostMatrix::new(n, n, values[..n * n].to_vec());
        let best = permutations(n)
            .iter()
            .map(|p| (0..n).map(|i| c.at(i, p[i])).sum::<f64>())
            .fold(f64::INFINITY, f64::min) / n as f64;
        let got = solve_exact(&c, 64).unwrap();
        prop_assert!((got.total_cost - best).abs() <= 1e-9 * best.max(1.0));
        for s in got.row_sums().iter().chain(got.col_sums().iter()) {
            prop_assert!((s - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_plan_marginals_rectangular(n in 1usize..8, m in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * m).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let plan = solve_exact(&CostMatrix::new(n, m, data), 64).unwrap();
        for s in plan.row_sums() {
            prop_assert!((s - 1.0 / n as f64).abs() < 1e-12);
        }
        for s in plan.col_sums() {
            prop_assert!((s - 1.0 / m as f64).abs() < 1e-12);
        }
        prop_assert!(plan.plan.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn sinkhorn_marginals_and_upper_bound(n in 2usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let c = CostMatrix::new(n, n, data);
        let u = vec![1.0 / n as f64; n];
        let s = solve_sinkhorn(&c, &u, &u, 0.05, 20_000, 1e-9).unwrap();
        prop_assert!(s.converged);
        for (got, want) in s.transport.row_sums().iter().zip(&u) {
            prop_assert!((got - want).abs() <= 1e-8);
        }
        // any feasible plan costs at least the optimum
        let exact = solve_exact(&c, 64).unwrap().total_cost;
        prop_assert!(s.transport.total_cost >= exact - 1e-8);
    }

    #[test]
    fn otdd_scale_covariance(seed in 0u64..1000, s in 0.1f64..10.0) {
        let cfg = OtddConfig::exact();
        let a = feature_set(12, 3, 2, seed);
        let b = feature_set(12, 3, 2, seed + 1);
        let d = otdd(&a, &b, &cfg).unwrap();
        let ds = otdd(&a.scaled(s), &b.scaled(s), &cfg).unwrap();
        prop_assert!(rel(ds, s * d) < 1e-6, "{} vs {}", ds, s * d);
    }

    #[test]
    fn otdd_symmetric_and_zero_on_self(seed in 0u64..1000) {
        let cfg = OtddConfig::exact();
        let a = feature_set(10, 2, 2, seed);
        let b = feature_set(14, 2, 2, seed + 7);
        prop_assert_eq!(otdd(&a, &a, &cfg).unwrap(), 0.0);
        let (ab, ba) = (otdd(&a, &b, &cfg).unwrap(), otdd(&b, &a, &cfg).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
    }

    // Translating every feature by t leaves the class covariances alone and
    // moves every class mean by t; with uniform marginals the cross terms
    // cancel, so the distance is |t| from the features plus |t| from the
    // label part: sqrt(2) |t|.
    #[test]
    fn otdd_translation_closed_form(seed in 0u64..1000, t in proptest::collection::vec(-3.0f64..3.0, 3)) {
        let cfg = OtddConfig::exact();
        let a = feature_set(12, 3, 3, seed);
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = otdd(&a, &a.translated(&t), &cfg).unwrap();
        prop_assert!((d - 2f64.sqrt() * norm).abs() <= 1e-6 * norm.max(1.0), "{} vs {}", d, 2f64.sqrt() * norm);
    }

    #[test]
    fn translation_is_monotone(seed in 0u64..1000, k1 in 0.0f64..2.0, k2 in 0.0f64..2.0) {
        let cfg = OtddConfig::exact();
        let a = feature_set(10, 2, 2, seed);
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        let d_lo = otdd(&a, &a.translated(&[lo, -lo]), &cfg).unwrap();
        let d_hi = otdd(&a, &a.translated(&[hi, -hi]), &cfg).unwrap();
        prop_assert!(d_lo <= d_hi + 1e-9);
    }

    #[test]
    fn w2_symmetric_nonnegative(seed in any::<u64>()) {
        let a = feature_set(20, 3, 2, seed);
        let m = class_moments(&a, 1e-6).unwrap();
        let (g0, g1) = (&m.classes[&0], &m.classes[&1]);
        let d01 = gaussian_w2(&g0.mean, &g0.cov, &g1.mean, &g1.cov).unwrap();
        let d10 = gaussian_w2(&g1.mean, &g1.cov, &g0.mean, &g0.cov).unwrap();
        prop_assert!(d01 >= 0.0);
        prop_assert!((d01 - d10).abs() < 1e-9);
        prop_assert_eq!(gaussian_w2(&g0.mean, &g0.cov, &g0.mean, &g0.cov).unwrap(), 0.0);
    }

    #[test]
    fn spearman_bounds_and_monotone_invariance(x in proptest::collection::vec(-100.0f64..100.0, 3..20)) {
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) + 5.0).collect();
        if let Some(r) = spearman(&x, &y) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
        let z: Vec<f64> = x.iter().rev().copied().collect();
        if let Some(r) = spearman(&x, &z) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
    }

    #[test]
    fn genotype_text_roundtrip(bits in proptest::collection::vec(any::<bool>(), 1..30)) {
        let g = Genotype::new(bits).unwrap();
        let back: Genotype = g.to_string().parse().unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn reference_count_additivity(bits in proptest::collection::vec(any::<bool>(), 7), stem in any::<bool>()) {
        thread_local! {
            static MODEL: blocksel::model::BlockedModel = efficientnet_b0(101, (224, 224), 0);
        }
        MODEL.with(|m| {
            let mut m = m.clone();
            m.set_stem_trainable(stem);
            let g = Genotype::new(bits).unwrap();
            m.apply_genotype(&g).unwrap();
            let specs = m.describe_blocks();
            let want = g.selected_blocks().iter().map(|b| specs[b - 1].param_count).sum::<usize>()
                + m.head_param_count()
                + if stem { m.stem_param_count() } else { 0 };
            assert_eq!(m.count_trainable_params(), want);
        });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn frozen_stages_never_move(bits in proptest::collection::vec(any::<bool>(), 3)) {
        let spec = DatasetSpec {
            name: "toy".into(),
            source: DatasetSource::Synthetic { per_class: 12, pattern_offset: 0, noise: 0.05, seed: 5, native_size: 16 },
            num_classes: 3,
            image_size: (16, 16),
            val_fraction: 0.2,
            test_fraction: 0.2,
            normalization: Normalization::Unit,
            augment_flip: true,
        };
        let s = load_splits(&spec, 0).unwrap();
        let g = Genotype::new(bits.clone()).unwrap();
        let mut m = toy_model(3, (16, 16), 1).with_genotype(&g).unwrap();
        let kinds: Vec<StageKind> = [StageKind::Stem].into_iter().chain((1..=3).map(StageKind::Block)).collect();
        let before: Vec<Vec<u8>> = kinds.iter().map(|k| m.stage_snapshot(*k)).collect();
        let cfg = TrainConfig { learning_rate: 3e-3, batch_size: 8, ..Default::default() };
        fine_tune(&mut m, &s.train, &s.val, &cfg, 1, None).unwrap();
        prop_assert_eq!(&before[0], &m.stage_snapshot(StageKind::Stem));
        for b in 1..=3 {
            let same = before[b] == m.stage_snapshot(StageKind::Block(b));
            prop_assert_eq!(same, !bits[b - 1], "block {}", b);
        }
    }

    #[test]
    fn stratified_draws_are_disjoint_and_balanced(seed in any::<u64>()) {
        let spec = DatasetSpec {
            name: "toy".into(),
            source: DatasetSource::Synthetic { per_class: 20, pattern_offset: 1, noise: 0.05, seed: 2, native_size: 8 },
            num_classes: 3,
            image_size: (8, 8),
            val_fraction: 0.1,
            test_fraction: 0.1,
            normalization: Normalization::Unit,
            augment_flip: false,
        };
        let train = load_splits(&spec, 0).unwrap().train;
        let draws = stratified_draws(&train, 12, seed, 3).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for d in &draws {
            prop_assert_eq!(d.len(), 12);
            prop_assert!(d.class_counts().values().all(|c| *c == 4));
            for id in d.ids() {
                prop_assert!(seen.insert(id.to_string()));
            }
        }
    }
}

mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use c2c::evaluation::{bias_sweep, harmonic_mean, metrics, ScoreMatrix};
use c2c::labelspace::{build_sthcom_split, check_split, SourceSplit, Split, SplitConfig};
use c2c::model::VideoShape;
use c2c::numerics::hsic::hsic_value;
use c2c::numerics::{Kernel, Tensor};
use c2c::training::sample_crop;
use common::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn built_splits_satisfy_invariants(data_seed in any::<u64>(), split_seed in any::<u64>()) {
        let records = random_annotations(data_seed);
        let cfg = SplitConfig { seed: split_seed, ..SplitConfig::default() };
        let (space, split) = build_sthcom_split(&records, &cfg).unwrap();
        prop_assert!(check_split(&space, &split, cfg.min_samples).is_empty());
        prop_assert_eq!(build_sthcom_split(&records, &cfg).unwrap(), (space.clone(), split.clone()));

        let by_id: HashMap<&str, _> = records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        for which in [Split::Train, Split::Val, Split::Test] {
            for s in split.samples(which) {
                let r = by_id[s.sample_id.as_str()];
                let (v, o) = space.composition(s.composition);
                prop_assert_eq!(&space.verbs()[v], &r.verb_name);
                prop_assert_eq!(&space.objects()[o], &r.object_name);
            }
        }
        // Unseen val/test compositions come only from the original test side.
        for which in [Split::Val, Split::Test] {
            for s in split.samples(which).iter().filter(|s| !split.is_seen(s.composition)) {
                prop_assert_eq!(by_id[s.sample_id.as_str()].source_split, SourceSplit::Test);
            }
        }
    }

    #[test]
    fn sweep_matches_flip_enumeration(seed in any::<u64>(), n in 2usize..60, na in 2usize..30, dyadic in any::<bool>()) {
        let m = random_matrix(&mut ChaCha8Rng::seed_from_u64(seed), n, na, dyadic);
        let curve = bias_sweep(&m).unwrap();
        let got: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.seen, p.unseen)).collect();
        let want = enumerate_regions(&m);
        prop_assert_eq!(&got, &want);
        let r = metrics(&curve, &m, None).unwrap();
        let o = oracle_metrics(&want);
        prop_assert_eq!((r.best_seen, r.best_unseen, r.best_hm, r.auc), (o.best_seen, o.best_unseen, o.best_hm, o.auc));
        for p in &curve.points {
            prop_assert_eq!(brute_accuracies(&m, p.bias), (p.seen, p.unseen));
        }
    }

    #[test]
    fn sweep_is_monotone(seed in any::<u64>(), n in 2usize..80, na in 2usize..40) {
        let m = random_matrix(&mut ChaCha8Rng::seed_from_u64(seed), n, na, false);
        let curve = bias_sweep(&m).unwrap();
        let first = curve.points[0];
        let last = curve.points[curve.len() - 1];
        prop_assert_eq!(first.seen, 0.0);
        prop_assert_eq!(last.unseen, 0.0);
        for w in curve.points.windows(2) {
            prop_assert!(w[0].bias < w[1].bias);
            prop_assert!(w[0].seen <= w[1].seen && w[0].unseen >= w[1].unseen);
        }
        let r = metrics(&curve, &m, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.auc));
        prop_assert!(r.best_hm <= r.best_seen.max(r.best_unseen));
        prop_assert_eq!(harmonic_mean(r.seen_at_best_hm, r.unseen_at_best_hm), r.best_hm);
    }

    #[test]
    fn constant_shift_leaves_metrics(seed in any::<u64>(), n in 2usize..50, na in 2usize..20, k in -3i32..=3) {
        let m = random_matrix(&mut ChaCha8Rng::seed_from_u64(seed), n, na, true);
        let c = 4.0 * f64::from(k);
        let shifted = ScoreMatrix::new(m.scores().iter().map(|s| s + c).collect(), m.ground_truth().to_vec(), m.seen().to_vec()).unwrap();
        let (a, b) = (bias_sweep(&m).unwrap(), bias_sweep(&shifted).unwrap());
        let ra = metrics(&a, &m, None).unwrap();
        let rb = metrics(&b, &shifted, None).unwrap();
        prop_assert_eq!((ra.best_seen, ra.best_unseen, ra.best_hm, ra.auc), (rb.best_seen, rb.best_unseen, rb.best_hm, rb.auc));
    }

    #[test]
    fn harmonic_mean_bounds(s in 0.0f64..=1.0, u in 0.0f64..=1.0) {
        let h = harmonic_mean(s, u);
        prop_assert!(h >= 0.0 && h <= s.max(u) + 1e-15);
        prop_assert!(h >= s.min(u) - 1e-15);
        prop_assert_eq!(h, harmonic_mean(u, s));
    }

    #[test]
    fn normalized_hsic_is_bounded_and_symmetric(seed in any::<u64>(), n in 3usize..12) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |c: usize| Tensor::matrix(n, c, (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (x, y) = (t(4), t(3));
        let xy = hsic_value(&x, Kernel::GaussianMedian, &y, Kernel::GaussianMedian).unwrap();
        let yx = hsic_value(&y, Kernel::GaussianMedian, &x, Kernel::GaussianMedian).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&xy));
        prop_assert!((xy - yx).abs() < 1e-12);
    }

    #[test]
    fn crops_stay_inside_the_frame(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let shape = VideoShape { frames: 2, height: h, width: w, channels: 1 };
        let c = sample_crop(shape, 0, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(c.y0 + c.h <= h && c.x0 + c.w <= w);
        prop_assert_eq!(c.lambda, (c.h * c.w) as f64 / (h * w) as f64);
    }
}

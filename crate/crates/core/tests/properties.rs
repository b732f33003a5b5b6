//! Randomized invariants.

mod common;

use common::*;
use mrkp_core::config::TrainConfig;
use mrkp_core::geometry::{farthest_point_indices, normalize_unit_box, AnnotationSet, KeypointSet, PointCloud};
use mrkp_core::losses::ccd_parts;
use mrkp_core::metrics::{das, miou};
use mrkp_core::mutual::{reshape_keypoints_with, Direction};
use mrkp_core::pairs::PairStream;
use mrkp_core::skeleton::segment_pairs;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64]
}

fn points(min: usize, max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(point(), min..=max)
}

fn spread(pts: &[[f64; 3]]) -> bool {
    pts.iter().any(|p| dist(*p, pts[0]) > 1e-3)
}

fn min_pairwise(pts: &[[f64; 3]], idx: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            best = best.min(dist(pts[i], pts[j]));
        }
    }
    best
}

fn subsets(n: usize, m: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize == m)
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_is_idempotent(pts in points(2, 60)) {
        prop_assume!(spread(&pts));
        let once = normalize_unit_box(&PointCloud::new(pts, None).unwrap()).unwrap();
        let twice = normalize_unit_box(&once).unwrap();
        for (a, b) in once.points().iter().zip(twice.points()) {
            prop_assert!(dist(*a, *b) < 1e-6);
        }
        let (lo, hi) = once.bounds();
        let side = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        prop_assert!((side - 1.0).abs() < 1e-6);
        prop_assert!(once.points().iter().flatten().all(|c| c.abs() <= 0.5 + 1e-9));
    }

    #[test]
    fn fps_is_a_subset_and_near_optimal(pts in points(2, 12), m in 2usize..6, seed in any::<u64>()) {
        let m = m.min(pts.len());
        let idx = farthest_point_indices(&pts, m, seed).unwrap();
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m);
        let sampled = mrkp_core::geometry::farthest_point_sample(&PointCloud::new(pts.clone(), None).unwrap(), m, seed).unwrap();
        for p in sampled.points() {
            prop_assert!(pts.contains(p));
        }
        // Greedy max-min is within a factor 2 of the best m-subset.
        let optimum = subsets(pts.len(), m).iter().map(|s| min_pairwise(&pts, s)).fold(0.0, f64::max);
        prop_assert!(min_pairwise(&pts, &idx) >= 0.5 * optimum - 1e-12);
    }

    #[test]
    fn pairs_always_cross_groups(count in 2usize..40, seed in any::<u64>(), epoch in 1usize..30) {
        let mut stream = PairStream::new(count, seed, epoch).unwrap();
        let (g1, g2) = stream.groups();
        let (g1, g2) = (g1.to_vec(), g2.to_vec());
        for _ in 0..3 * epoch {
            let (a, b) = stream.next_pair();
            prop_assert!((g1.contains(&a) && g2.contains(&b)) || (g2.contains(&a) && g1.contains(&b)));
        }
    }

    #[test]
    fn reshaping_conserves_the_keypoint_sum(k in 1usize..8, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let kp1 = KeypointSet::new(random_points(&mut rng, k, 1.0), "a");
        let kp2 = KeypointSet::new(random_points(&mut rng, k, 1.0), "b");
        let off = random_points(&mut rng, k, 1.0);
        for dir in [Direction::Verbatim, Direction::Mirrored] {
            let r = reshape_keypoints_with(&kp1, &kp2, &off, dir).unwrap();
            for c in 0..k {
                for x in 0..3 {
                    let lhs = r.kp1_prime.keypoints[c][x] + r.kp2_prime.keypoints[c][x];
                    let rhs = kp1.keypoints[c][x] + kp2.keypoints[c][x];
                    prop_assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fidelity_grows_with_activation(
        seg in prop::collection::vec(points(1, 6), 1..4),
        target in points(1, 8),
        which in 0usize..4,
        bump in 0.0..1.0f64,
    ) {
        let acts: Vec<f64> = (0..seg.len()).map(|i| 0.2 + 0.1 * i as f64).collect();
        let mut more = acts.clone();
        let w = which % seg.len();
        more[w] += bump;
        let mut flat = Vec::new();
        let mut ranges = Vec::new();
        for s in &seg {
            ranges.push(flat.len()..flat.len() + s.len());
            flat.extend_from_slice(s);
        }
        let a = ccd_parts(&flat, &ranges, &acts, &target).unwrap().fidelity;
        let b = ccd_parts(&flat, &ranges, &more, &target).unwrap().fidelity;
        prop_assert!(b >= a);
    }

    #[test]
    fn single_segment_ccd_is_symmetric_chamfer(seg in points(1, 10), target in points(1, 10)) {
        let parts = ccd_parts(&seg, &[0..seg.len()], &[1.0], &target).unwrap();
        let forward: f64 = seg.iter().map(|q| target.iter().map(|p| dist(*p, *q)).fold(f64::INFINITY, f64::min)).sum();
        let backward: f64 = target.iter().map(|p| seg.iter().map(|q| dist(*p, *q)).fold(f64::INFINITY, f64::min)).sum();
        prop_assert!((parts.fidelity + parts.coverage - forward - backward).abs() < 1e-9);
    }

    #[test]
    fn miou_is_monotone_in_tau(pred in points(1, 8), ann in points(1, 8), t1 in 0.01..3.0f64, t2 in 0.01..3.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let kp = KeypointSet::new(pred, "p");
        let a = AnnotationSet::new("a", ann.into_iter().enumerate().map(|(i, p)| (i as i64, p)).collect()).unwrap();
        prop_assert!(miou(&kp, &a, hi).unwrap() >= miou(&kp, &a, lo).unwrap());
    }

    #[test]
    fn metrics_ignore_channel_labels(
        src in points(3, 3),
        refp in points(3, 3),
        ann_src in points(4, 4),
        ann_ref in points(4, 4),
        perm in Just([2usize, 0, 1]),
    ) {
        let relabel = |p: &Vec<[f64; 3]>| KeypointSet::new(perm.iter().map(|&i| p[i]).collect(), "k");
        let a1 = AnnotationSet::new("a", ann_src.iter().enumerate().map(|(i, p)| (i as i64, *p)).collect()).unwrap();
        let a2 = AnnotationSet::new("b", ann_ref.iter().enumerate().map(|(i, p)| (i as i64, *p)).collect()).unwrap();
        let (s, r) = (KeypointSet::new(src.clone(), "s"), KeypointSet::new(refp.clone(), "r"));
        let base = das(&s, &r, &a1, &a2).unwrap();
        prop_assert_eq!(base, das(&relabel(&src), &relabel(&refp), &a1, &a2).unwrap());
        prop_assert_eq!(miou(&s, &a1, 0.5).unwrap(), miou(&relabel(&src), &a1, 0.5).unwrap());
    }

    #[test]
    fn skeleton_count_is_pairs_of_keypoints(k in 2usize..30) {
        let pairs = segment_pairs(k);
        prop_assert_eq!(pairs.len(), k * (k - 1) / 2);
        prop_assert!(pairs.iter().all(|&(i, j)| i < j && j < k));
    }

    #[test]
    fn config_round_trips(
        k in 1usize..50,
        seed in any::<u64>(),
        lr in 1e-9..1.0f64,
        ls in 0.0..10.0f64,
        mirrored in any::<bool>(),
    ) {
        let mut cfg = TrainConfig { keypoints: k, seed, learning_rate: lr, ..TrainConfig::default() };
        cfg.weights.lambda_self = ls;
        cfg.direction = if mirrored { Direction::Mirrored } else { Direction::Verbatim };
        prop_assert_eq!(TrainConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}

mod common;

use mtgan::evalkit::{compute_accuracy, compute_eer, det_curve, operating_points, TrialScoreSet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trials_strategy() -> impl Strategy<Value = Vec<(f64, bool)>> {
    (any::<u64>(), 2usize..300).prop_map(|(seed, max)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::random_trials(&mut rng, max)
    })
}

fn set(pairs: &[(f64, bool)]) -> TrialScoreSet {
    TrialScoreSet::from_pairs(pairs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn eer_and_accuracy_match_brute_force(pairs in trials_strategy()) {
        let (eer, _) = compute_eer(&set(&pairs)).unwrap();
        prop_assert!((eer - common::brute_eer(&pairs)).abs() < 1e-9);
        let (acc, t) = compute_accuracy(&set(&pairs)).unwrap();
        let (bacc, bt) = common::brute_accuracy(&pairs);
        prop_assert!((acc - bacc).abs() < 1e-9);
        prop_assert_eq!(t, bt);
    }

    #[test]
    fn eer_is_a_rate_and_mirrors_under_negation(pairs in trials_strategy()) {
        let (eer, _) = compute_eer(&set(&pairs)).unwrap();
        prop_assert!((0.0..=1.0).contains(&eer));
        let flipped: Vec<(f64, bool)> = pairs.iter().map(|&(s, t)| (-s, t)).collect();
        let (eer_flipped, _) = compute_eer(&set(&flipped)).unwrap();
        prop_assert!((eer + eer_flipped - 1.0).abs() < 1e-9, "{} + {}", eer, eer_flipped);
        prop_assert!(eer.min(eer_flipped) <= 0.5);
    }

    #[test]
    fn metrics_ignore_strictly_increasing_transforms(pairs in trials_strategy(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mapped: Vec<(f64, bool)> = pairs.iter().map(|&(s, t)| (a * s + b + s.powi(3), t)).collect();
        let (e0, _) = compute_eer(&set(&pairs)).unwrap();
        let (e1, _) = compute_eer(&set(&mapped)).unwrap();
        prop_assert!((e0 - e1).abs() < 1e-9);
        let (a0, _) = compute_accuracy(&set(&pairs)).unwrap();
        let (a1, _) = compute_accuracy(&set(&mapped)).unwrap();
        prop_assert!((a0 - a1).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_trial_order(pairs in trials_strategy(), rot in 0usize..1000) {
        let mut shuffled = pairs.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(compute_eer(&set(&pairs)).unwrap(), compute_eer(&set(&shuffled)).unwrap());
        prop_assert_eq!(compute_accuracy(&set(&pairs)).unwrap(), compute_accuracy(&set(&shuffled)).unwrap());
    }

    #[test]
    fn det_curve_is_monotone_with_both_endpoints(pairs in trials_strategy(), n in 2usize..50) {
        let det = det_curve(&set(&pairs), n).unwrap();
        prop_assert_eq!(det.points.first().copied(), Some((1.0, 0.0)));
        prop_assert_eq!(det.points.last().copied(), Some((0.0, 1.0)));
        for w in det.points.windows(2) {
            prop_assert!(w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
        }
    }
}

#[test]
fn operating_points_match_pointwise_recount_on_100_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut pairs = common::random_trials(&mut rng, 400);
    pairs.truncate(100);
    pairs[0].1 = true;
    pairs[1].1 = false;
    let pts = operating_points(&set(&pairs)).unwrap();
    let oracle = common::brute_points(&pairs);
    assert_eq!(pts.len(), oracle.len());
    for (p, (t, far, frr)) in pts.iter().zip(oracle) {
        assert_eq!(p.threshold, t);
        assert!((p.far - far).abs() < 1e-12 && (p.frr - frr).abs() < 1e-12);
    }
    let det = det_curve(&set(&pairs), pts.len()).unwrap();
    assert_eq!(det.points.len(), pts.len());
    for (d, p) in det.points.iter().zip(&pts) {
        assert_eq!(*d, (p.far, p.frr));
    }
}

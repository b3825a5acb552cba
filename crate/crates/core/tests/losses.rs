mod common;

use mtgan::config::{LossWeights, Margin, TripletReduction};
use mtgan::losses::{cosine_distance, gan_losses, softmax_loss, total_loss, triplet_loss, triplet_loss_indexed};
use mtgan::LossComponents;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn triple_batches(seed: u64, n: usize, d: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        common::unit_rows(&mut rng, n, d),
        common::unit_rows(&mut rng, n, d),
        common::unit_rows(&mut rng, n, d),
    )
}

/// Random orthogonal matrix by Gram–Schmidt on Gaussian columns.
fn rotation(seed: u64, d: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let m = common::normal2(&mut rng, (d, d));
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = m.column(j).to_owned();
        for k in 0..j {
            let qk = q.column(k).to_owned();
            v = &v - &(&qk * qk.dot(&v));
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / norm));
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn triplet_loss_is_zero_exactly_when_all_margins_hold(
        seed in any::<u64>(), n in 1usize..12, d in 2usize..8, alpha in 0.0f64..1.0,
    ) {
        let (a, p, ng) = triple_batches(seed, n, d);
        let margin = Margin::new(alpha).unwrap();
        let loss = triplet_loss(&a, &p, &ng, margin, TripletReduction::Sum).unwrap();
        prop_assert!(loss >= 0.0);
        let all_hold = (0..n).all(|i| {
            let d_ap = cosine_distance(&a.row(i).to_vec(), &p.row(i).to_vec());
            let d_an = cosine_distance(&a.row(i).to_vec(), &ng.row(i).to_vec());
            d_an >= d_ap + alpha
        });
        prop_assert_eq!(loss == 0.0, all_hold);
    }

    #[test]
    fn triplet_loss_is_rotation_invariant(seed in any::<u64>(), n in 1usize..10, d in 2usize..8) {
        let (a, p, ng) = triple_batches(seed, n, d);
        let r = rotation(seed, d);
        let margin = Margin::default();
        let before = triplet_loss(&a, &p, &ng, margin, TripletReduction::Sum).unwrap();
        let after = triplet_loss(&a.dot(&r), &p.dot(&r), &ng.dot(&r), margin, TripletReduction::Sum).unwrap();
        prop_assert!((before - after).abs() < 1e-9, "{} vs {}", before, after);
    }

    #[test]
    fn mean_reduction_divides_the_sum(seed in any::<u64>(), n in 1usize..10) {
        let (a, p, ng) = triple_batches(seed, n, 4);
        let sum = triplet_loss(&a, &p, &ng, Margin::default(), TripletReduction::Sum).unwrap();
        let mean = triplet_loss(&a, &p, &ng, Margin::default(), TripletReduction::Mean).unwrap();
        prop_assert!((sum / n as f64 - mean).abs() < 1e-12);
    }

    #[test]
    fn softmax_loss_is_nonnegative_and_shift_invariant(
        seed in any::<u64>(), n in 1usize..6, c in 2usize..10, shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = common::normal2(&mut rng, (n, c)) * 3.0;
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % c).collect();
        let (l0, g0) = softmax_loss(&logits, &labels).unwrap();
        prop_assert!(l0 >= 0.0);
        let mut shifted = logits.clone();
        for (i, mut row) in shifted.rows_mut().into_iter().enumerate() {
            row += shift * (i as f64 + 1.0);
        }
        let (l1, g1) = softmax_loss(&shifted, &labels).unwrap();
        prop_assert!((l0 - l1).abs() < 1e-9);
        prop_assert!(g0.iter().zip(g1.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn generator_loss_is_negated_mean_fake_score(
        fake in prop::collection::vec(-1e3f64..1e3, 1..40),
        real in prop::collection::vec(-1e3f64..1e3, 1..40),
        gp in 0.0f64..5.0,
    ) {
        let g = gan_losses(&real, &fake, gp, 10.0);
        let mean = fake.iter().sum::<f64>() / fake.len() as f64;
        prop_assert_eq!(g.generator + mean, 0.0);
    }

    #[test]
    fn zero_weights_drop_their_terms(
        t in 0.0f64..10.0, s in 0.0f64..10.0, g in -10.0f64..10.0, d in -10.0f64..10.0, mask in 0u8..16,
    ) {
        let c = LossComponents { triplet: t, softmax: s, generator: g, critic: d };
        let mut w = LossWeights::default();
        let terms = [(&mut w.triplet, t), (&mut w.softmax, s), (&mut w.generator, g), (&mut w.critic, d)];
        let mut expected = 0.0;
        for (bit, (wi, v)) in terms.into_iter().enumerate() {
            if mask & (1 << bit) != 0 {
                *wi = 0.0;
            } else {
                expected += *wi * v;
            }
        }
        prop_assert_eq!(total_loss(&c, &w).unwrap(), expected);
    }
}

#[test]
fn indexed_and_batched_forms_agree() {
    let (a, p, n) = triple_batches(3, 5, 6);
    let stacked = ndarray::concatenate![ndarray::Axis(0), a, p, n];
    let triples: Vec<_> = (0..5).map(|i| (i, 5 + i, 10 + i)).collect();
    let (li, _) = triplet_loss_indexed(&stacked, &triples, Margin::default(), TripletReduction::Sum).unwrap();
    let lb = triplet_loss(&a, &p, &n, Margin::default(), TripletReduction::Sum).unwrap();
    assert_eq!(li, lb);
}

#[test]
fn reference_values() {
    // −log softmax([1, 2, 3])[2] = ln(e + e² + e³) − 3.
    let logits = ndarray::array![[1.0, 2.0, 3.0]];
    let (l, _) = softmax_loss(&logits, &[2]).unwrap();
    assert!((l - 0.40760596444437466).abs() < 1e-9);
    let c = LossComponents { triplet: 1.0, softmax: 1.0, generator: 1.0, critic: 1.0 };
    assert!((total_loss(&c, &LossWeights::default()).unwrap() - 1.0).abs() < 1e-12);
}

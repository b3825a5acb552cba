//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use mtgan::config::{Architecture, SamplingPlan, TrainConfig, TripletReduction};
use mtgan::featio::{FbankSlice, FeatureSet, SyntheticCorpus};
use mtgan::losses::cosine_distance;
use mtgan::nn::{Grads, Sequential};
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Downscaled networks on 8 × 8 inputs.
pub fn small_arch() -> Architecture {
    Architecture {
        frames: 8,
        mels: 8,
        embed_dim: 6,
        noise_dim: 3,
        encoder_channels: vec![2, 3],
        generator_channels: vec![3, 2],
        critic_channels: vec![2, 3],
        classifier_channels: vec![2],
        ..Architecture::default()
    }
}

/// Toy-scale model used by the end-to-end checks.
pub fn toy_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        arch: Architecture {
            frames: 32,
            mels: 32,
            embed_dim: 64,
            noise_dim: 16,
            encoder_channels: vec![8, 16, 32],
            generator_channels: vec![32, 16, 8],
            critic_channels: vec![8, 16, 32],
            classifier_channels: vec![8, 16, 32],
            ..Architecture::default()
        },
        plan: SamplingPlan {
            speakers: None,
            anchors: 2,
            positives: 2,
            other_classes: 4,
            negatives: 2,
            ..SamplingPlan::default()
        },
        batch_speakers: 3,
        triplet_reduction: TripletReduction::Mean,
        epochs: 60,
        ..TrainConfig::default()
    };
    c.set_seed(seed);
    c
}

/// 20 speakers × 10 utterances of three 32 × 32 slices each.
pub fn toy_corpus(seed: u64) -> FeatureSet {
    let mut c = SyntheticCorpus::new(20, 10, seed);
    c.frames = 32;
    c.mels = 32;
    c.slices_per_utterance = 3;
    c.speaker_strength = 0.75;
    c.generate().expect("valid corpus")
}

/// Small corpus matching [`small_arch`]-style 16 × 16 inputs.
pub fn tiny_corpus(speakers: usize, utts: usize, size: usize, seed: u64) -> FeatureSet {
    let mut c = SyntheticCorpus::new(speakers, utts, seed);
    c.frames = size;
    c.mels = size;
    c.generate().expect("valid corpus")
}

/// Feature set of random matrices with the given slices per speaker.
pub fn random_features(rng: &mut ChaCha8Rng, per_speaker: &[usize], size: usize) -> FeatureSet {
    let mut slices = Vec::new();
    for (s, &count) in per_speaker.iter().enumerate() {
        for u in 0..count {
            slices.push(FbankSlice {
                matrix: (0..size * size).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
                frames: size,
                mels: size,
                speaker_id: format!("s{s:03}"),
                utterance_id: format!("s{s:03}-u{u:03}"),
                slice_index: 0,
            });
        }
    }
    FeatureSet::from_slices(slices).expect("consistent slices")
}

pub fn normal4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

pub fn normal2(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

pub fn rows(a: &Array4<f64>) -> Array2<f64> {
    let n = a.shape()[0];
    let d = a.len() / n;
    a.as_standard_layout().into_owned().into_shape_with_order((n, d)).unwrap()
}

pub fn as4(a: Array2<f64>) -> Array4<f64> {
    let (n, d) = a.dim();
    a.into_shape_with_order((n, d, 1, 1)).unwrap()
}

/// Relative errors of `grads` against central differences of `loss` along
/// `probes` random directions in parameter space.
pub fn directional_probes(
    net: &Sequential,
    grads: &Grads,
    loss: &dyn Fn(&Sequential) -> f64,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    const H: f64 = 1e-6;
    (0..probes)
        .map(|_| {
            let dir: Vec<Vec<f64>> = net
                .params()
                .iter()
                .map(|p| (0..p.len()).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let analytic: f64 = grads
                .0
                .iter()
                .flatten()
                .zip(dir.iter().flatten())
                .map(|(g, d)| g * d)
                .sum();
            let shifted = |sign: f64| {
                let mut n = net.clone();
                for (p, d) in n.params_mut().into_iter().zip(&dir) {
                    p.iter_mut().zip(d).for_each(|(v, dv)| *v += sign * H * dv);
                }
                loss(&n)
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * H);
            rel_err(analytic, numeric)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Operating points recounted from scratch at every candidate threshold.
pub fn brute_points(pairs: &[(f64, bool)]) -> Vec<(f64, f64, f64)> {
    let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let n_tar = pairs.iter().filter(|p| p.1).count() as f64;
    let n_non = pairs.len() as f64 - n_tar;
    thresholds
        .into_iter()
        .map(|t| {
            let fa = pairs.iter().filter(|p| !p.1 && p.0 >= t).count() as f64;
            let fr = pairs.iter().filter(|p| p.1 && p.0 < t).count() as f64;
            (t, fa / n_non, fr / n_tar)
        })
        .collect()
}

/// EER by brute-force recounting: first threshold where FRR ≥ FAR,
/// interpolated against the previous one.
pub fn brute_eer(pairs: &[(f64, bool)]) -> f64 {
    let pts = brute_points(pairs);
    let i = pts.iter().position(|p| p.2 >= p.1).unwrap();
    if i == 0 {
        return pts[0].1;
    }
    let (_, far0, frr0) = pts[i - 1];
    let (_, far1, frr1) = pts[i];
    let gap0 = far0 - frr0;
    let gap1 = far1 - frr1;
    far0 + gap0 / (gap0 - gap1) * (far1 - far0)
}

/// Best accuracy over every threshold, ties to the lowest threshold.
pub fn brute_accuracy(pairs: &[(f64, bool)]) -> (f64, f64) {
    let mut best = (-1.0, 0.0);
    for (t, _, _) in brute_points(pairs) {
        let correct = pairs.iter().filter(|p| (p.0 >= t) == p.1).count() as f64;
        let acc = correct / pairs.len() as f64;
        if acc > best.0 {
            best = (acc, t);
        }
    }
    best
}

/// Random trial set with quantized scores (to create ties); always holds
/// both classes.
pub fn random_trials(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<(f64, bool)> {
    let n = rng.random_range(2..=max_len);
    let levels = rng.random_range(2..=200) as f64;
    let shift: f64 = rng.random_range(0.0..1.5);
    let mut pairs: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let target = rng.random_bool(0.3);
            let raw: f64 = rng.sample::<f64, _>(StandardNormal) + if target { shift } else { 0.0 };
            ((raw * levels / 4.0).round() / (levels / 4.0), target)
        })
        .collect();
    pairs[0].1 = true;
    pairs[1].1 = false;
    pairs
}

/// Semi-hard choice for one pair by enumeration: hardest negative inside
/// the window `(d_ap, d_ap + α)`; otherwise the nearest negative with
/// `d_an ≥ d_ap`; otherwise the farthest remaining one. Lowest index wins
/// ties. Returns `(negative, fallback)`.
pub fn brute_semi_hard(emb: &Array2<f64>, a: usize, p: usize, negatives: &[usize], alpha: f64) -> (usize, bool) {
    let d = |i: usize, j: usize| cosine_distance(&emb.row(i).to_vec(), &emb.row(j).to_vec());
    let d_ap = d(a, p);
    let pick = |set: Vec<usize>, key: &dyn Fn(usize) -> f64| -> Option<usize> {
        let mut best: Option<usize> = None;
        for n in set {
            if best.is_none_or(|b| key(n) < key(b)) {
                best = Some(n);
            }
        }
        best
    };
    let window: Vec<usize> = negatives.iter().copied().filter(|&n| d(a, n) > d_ap && d(a, n) < d_ap + alpha).collect();
    if let Some(n) = pick(window, &|n| d(a, n)) {
        return (n, false);
    }
    let easy: Vec<usize> = negatives.iter().copied().filter(|&n| d(a, n) >= d_ap).collect();
    if let Some(n) = pick(easy, &|n| d(a, n)) {
        return (n, true);
    }
    (pick(negatives.to_vec(), &|n| -d(a, n)).unwrap(), true)
}

/// Unit-norm rows.
pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = normal2(rng, (n, d));
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / norm);
    }
    m
}

//! Deterministic inputs for the pipeline benchmarks.

use mtgan::config::Architecture;
use mtgan::evalkit::TrialScoreSet;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` trials, 10% targets, target scores shifted up by one.
pub fn trial_set(n: usize, seed: u64) -> TrialScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(f64, bool)> = (0..n)
        .map(|i| {
            let target = i % 10 == 0;
            let s: f64 = rng.random_range(-1.0..1.0);
            (s + if target { 1.0 } else { 0.0 }, target)
        })
        .collect();
    TrialScoreSet::from_pairs(&pairs)
}

/// Uniform noise batch shaped for `arch`.
pub fn input_batch(arch: &Architecture, n: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((n, 1, arch.frames, arch.mels), || rng.random_range(-1.0..1.0))
}

/// Sine tone at `hz`, 16 kHz, `seconds` long, amplitude 0.5.
pub fn tone(hz: f64, seconds: f64) -> Vec<f32> {
    let n = (seconds * 16_000.0) as usize;
    (0..n)
        .map(|i| (0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / 16_000.0).sin()) as f32)
        .collect()
}

/// The 32 × 32 networks used for toy-scale training.
pub fn toy_arch() -> Architecture {
    Architecture {
        frames: 32,
        mels: 32,
        embed_dim: 64,
        noise_dim: 16,
        encoder_channels: vec![8, 16, 32],
        generator_channels: vec![32, 16, 8],
        critic_channels: vec![8, 16, 32],
        classifier_channels: vec![8, 16, 32],
        ..Architecture::default()
    }
}

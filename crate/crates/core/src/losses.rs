//! Loss terms and their weighted combination.
//!
//! The triplet hinge uses cosine distance `d(u, v) = 1 − u·v` between
//! unit-norm embeddings. For unit vectors `‖u − v‖² = 2·d(u, v)`, so this
//! is the squared-Euclidean triplet loss with every distance halved; the
//! margin is expressed in cosine-distance units.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossWeights, Margin, TripletReduction};
use crate::error::{Error, Result};
use crate::nets::DiscriminatorNet;
use crate::nn::Grads;

/// Index triple `(anchor, positive, negative)` into a batch.
pub type Triple = (usize, usize, usize);

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Hinged triplet loss over row-aligned anchor/positive/negative batches.
pub fn triplet_loss(
    anchors: &Array2<f64>,
    positives: &Array2<f64>,
    negatives: &Array2<f64>,
    margin: Margin,
    reduction: TripletReduction,
) -> Result<f64> {
    if anchors.dim() != positives.dim() || anchors.dim() != negatives.dim() {
        return Err(Error::shape(
            format!("{:?} for all three batches", anchors.dim()),
            format!("{:?} / {:?}", positives.dim(), negatives.dim()),
        ));
    }
    let n = anchors.nrows();
    let mut stacked = Array2::zeros((3 * n, anchors.ncols()));
    stacked.slice_mut(ndarray::s![..n, ..]).assign(anchors);
    stacked.slice_mut(ndarray::s![n..2 * n, ..]).assign(positives);
    stacked.slice_mut(ndarray::s![2 * n.., ..]).assign(negatives);
    let triples: Vec<Triple> = (0..n).map(|i| (i, n + i, 2 * n + i)).collect();
    Ok(triplet_loss_indexed(&stacked, &triples, margin, reduction)?.0)
}

/// Triplet loss over triples indexing rows of `embeddings`, with the
/// gradient w.r.t. every row.
pub fn triplet_loss_indexed(
    embeddings: &Array2<f64>,
    triples: &[Triple],
    margin: Margin,
    reduction: TripletReduction,
) -> Result<(f64, Array2<f64>)> {
    let n = embeddings.nrows();
    if let Some(t) = triples.iter().find(|t| t.0 >= n || t.1 >= n || t.2 >= n) {
        return Err(Error::shape(format!("indices < {n}"), format!("{t:?}")));
    }
    let scale = match reduction {
        TripletReduction::Sum => 1.0,
        TripletReduction::Mean if triples.is_empty() => 0.0,
        TripletReduction::Mean => 1.0 / triples.len() as f64,
    };
    let mut grad = Array2::zeros(embeddings.raw_dim());
    let mut loss = 0.0;
    for &(a, p, ng) in triples {
        let (ea, ep, en) = (embeddings.row(a), embeddings.row(p), embeddings.row(ng));
        let d_ap = 1.0 - ea.dot(&ep);
        let d_an = 1.0 - ea.dot(&en);
        let hinge = d_ap - d_an + margin.0;
        if hinge > 0.0 {
            loss += hinge;
            // hinge = a·n − a·p + α
            let ga = (&en - &ep) * scale;
            let gp = &ea * (-scale);
            let gn = &ea * scale;
            let mut row = grad.row_mut(a);
            row += &ga;
            let mut row = grad.row_mut(p);
            row += &gp;
            let mut row = grad.row_mut(ng);
            row += &gn;
        }
    }
    Ok((loss * scale, grad))
}

/// Mean cross-entropy over rows of `logits`, with its gradient.
pub fn softmax_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} labels"), labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape(format!("label < {c}"), l));
    }
    if n == 0 {
        return Ok((0.0, Array2::zeros((0, c))));
    }
    let mut grad = Array2::zeros((n, c));
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = ((row[j] - log_z).exp() - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Adversarial loss pair with gradients w.r.t. the critic scores.
#[derive(Clone, Debug, PartialEq)]
pub struct GanLosses {
    pub generator: f64,
    pub critic: f64,
    /// ∂L_D/∂real_scores
    pub d_real: Vec<f64>,
    /// ∂L_D/∂fake_scores
    pub d_fake: Vec<f64>,
    /// ∂L_G/∂fake_scores
    pub g_fake: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Wasserstein losses: `L_D = mean(fake) − mean(real) + λ·gp`,
/// `L_G = −mean(fake)`.
pub fn gan_losses(real_scores: &[f64], fake_scores: &[f64], gp: f64, lambda: f64) -> GanLosses {
    let (nr, nf) = (real_scores.len().max(1) as f64, fake_scores.len().max(1) as f64);
    GanLosses {
        generator: -mean(fake_scores),
        critic: mean(fake_scores) - mean(real_scores) + lambda * gp,
        d_real: vec![-1.0 / nr; real_scores.len()],
        d_fake: vec![1.0 / nf; fake_scores.len()],
        g_fake: vec![-1.0 / nf; fake_scores.len()],
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Original log-loss game on logits: `D = σ(score)`,
/// `L_D = −mean log D(x) − mean log(1 − D(G(z)))`, and the non-saturating
/// generator loss `L_G = −mean log D(G(z))`.
pub fn log_gan_losses(real_scores: &[f64], fake_scores: &[f64]) -> GanLosses {
    let (nr, nf) = (real_scores.len().max(1) as f64, fake_scores.len().max(1) as f64);
    GanLosses {
        generator: mean(&fake_scores.iter().map(|&f| softplus(-f)).collect::<Vec<_>>()),
        critic: mean(&real_scores.iter().map(|&r| softplus(-r)).collect::<Vec<_>>())
            + mean(&fake_scores.iter().map(|&f| softplus(f)).collect::<Vec<_>>()),
        d_real: real_scores.iter().map(|&r| (sigmoid(r) - 1.0) / nr).collect(),
        d_fake: fake_scores.iter().map(|&f| sigmoid(f) / nf).collect(),
        g_fake: fake_scores.iter().map(|&f| (sigmoid(f) - 1.0) / nf).collect(),
    }
}

/// `ε·real + (1 − ε)·fake`, one ε per sample.
pub fn interpolate(real: &Array4<f64>, fake: &Array4<f64>, eps: &[f64]) -> Result<Array4<f64>> {
    if real.dim() != fake.dim() || eps.len() != real.shape()[0] {
        return Err(Error::shape(format!("{:?}", real.dim()), format!("{:?}", fake.dim())));
    }
    let mut out = fake.clone();
    for (b, &e) in eps.iter().enumerate() {
        let r = real.index_axis(ndarray::Axis(0), b);
        let mut o = out.index_axis_mut(ndarray::Axis(0), b);
        ndarray::Zip::from(&mut o).and(&r).for_each(|o, &r| *o = e * r + (1.0 - e) * *o);
    }
    Ok(out)
}

/// Per-sample interpolation coefficients drawn uniformly from `[0, 1)`.
pub fn interpolation_eps(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Gradient penalty `mean_b (‖∇ D(x̂_b)‖₂ − 1)²` at random interpolates of
/// `real` and `fake`.
pub fn gradient_penalty(
    critic: &DiscriminatorNet,
    real: &Array4<f64>,
    fake: &Array4<f64>,
    seed: u64,
) -> Result<f64> {
    let eps = interpolation_eps(real.shape()[0], seed);
    Ok(gradient_penalty_at(critic, real, fake, &eps, 1.0)?.0)
}

/// Gradient penalty for explicit coefficients `eps`; also returns `scale ×`
/// its gradient w.r.t. the critic parameters.
pub fn gradient_penalty_at(
    critic: &DiscriminatorNet,
    real: &Array4<f64>,
    fake: &Array4<f64>,
    eps: &[f64],
    scale: f64,
) -> Result<(f64, Grads)> {
    let x_hat = interpolate(real, fake, eps)?;
    let (gp, grads, _) = critic.net.gradient_penalty(&x_hat, scale)?;
    Ok((gp, grads))
}

/// The four per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub triplet: f64,
    pub softmax: f64,
    pub generator: f64,
    pub critic: f64,
}

impl LossComponents {
    pub fn check_finite(&self) -> Result<()> {
        for (name, value) in [
            ("L_T", self.triplet),
            ("L_S", self.softmax),
            ("L_G", self.generator),
            ("L_D", self.critic),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFinite { name, value });
            }
        }
        Ok(())
    }
}

/// `ω₁·L_T + ω₂·L_S + ω₃·L_G + ω₄·L_D`. Only used for reporting; each
/// network is optimized against its own terms.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    c.check_finite()?;
    Ok(w.triplet * c.triplet + w.softmax * c.softmax + w.generator * c.generator + w.critic * c.critic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn cosine_distance_reference_points() {
        let a = unit(&[1.0, 2.0, -0.5]);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!(cosine_distance(&a, &a).abs() < 1e-15);
        assert!((cosine_distance(&a, &neg) - 2.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        let b = unit(&[0.3, -1.0, 2.0]);
        assert_eq!(cosine_distance(&a, &b), cosine_distance(&b, &a));
    }

    #[test]
    fn degenerate_triplets_cost_margin_each() {
        let e = array![[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]];
        let l = triplet_loss(&e, &e, &e, Margin(0.2), TripletReduction::Sum).unwrap();
        assert!((l - 3.0 * 0.2).abs() < 1e-12);
        let l = triplet_loss(&e, &e, &e, Margin(0.2), TripletReduction::Mean).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
    }

    #[test]
    fn satisfied_margin_gives_zero() {
        // d(a,p) = 0, d(a,n) = 1
        let a = array![[1.0, 0.0]];
        let n = array![[0.0, 1.0]];
        let l = triplet_loss(&a, &a, &n, Margin(0.2), TripletReduction::Sum).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn violated_margin_matches_arithmetic() {
        // d(a,p) = 0.5 (cos 0.5), d(a,n) = 0.4 (cos 0.6); expected 0.5 - 0.4 + 0.2.
        let a = array![[1.0, 0.0]];
        let p = array![[0.5, (1.0f64 - 0.25).sqrt()]];
        let n = array![[0.6, 0.8]];
        let l = triplet_loss(&a, &p, &n, Margin(0.2), TripletReduction::Sum).unwrap();
        assert!((l - 0.3).abs() < 1e-12, "{l}");
    }

    #[test]
    fn triplet_size_mismatch_is_an_error() {
        let a = array![[1.0, 0.0]];
        let b = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(triplet_loss(&a, &b, &a, Margin(0.2), TripletReduction::Sum).is_err());
    }

    #[test]
    fn softmax_loss_reference_values() {
        let (l, _) = softmax_loss(&Array2::zeros((1, 10)), &[3]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let (l, _) = softmax_loss(&array![[1.0, 2.0, 3.0]], &[2]).unwrap();
        // -ln(e^3 / (e + e^2 + e^3)) = ln(1 + e^-1 + e^-2)
        let oracle = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.40761).abs() < 1e-5);
        let (l, _) = softmax_loss(&array![[0.0, 800.0]], &[1]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn softmax_loss_rejects_bad_labels() {
        assert!(softmax_loss(&Array2::zeros((2, 3)), &[0]).is_err());
        assert!(softmax_loss(&Array2::zeros((1, 3)), &[3]).is_err());
    }

    #[test]
    fn wgan_losses_arithmetic() {
        let g = gan_losses(&[0.3, -0.2], &[0.3, -0.2], 0.0, 10.0);
        assert_eq!(g.critic, 0.0);
        let g = gan_losses(&[1.0, 1.0], &[-1.0, -1.0], 0.0, 10.0);
        assert_eq!((g.critic, g.generator), (-2.0, 1.0));
        let g = gan_losses(&[0.0], &[0.0], 0.25, 10.0);
        assert!((g.critic - 2.5).abs() < 1e-15);
    }

    #[test]
    fn total_loss_weighting() {
        let ones = LossComponents {
            triplet: 1.0,
            softmax: 1.0,
            generator: 1.0,
            critic: 1.0,
        };
        let t = total_loss(&ones, &LossWeights::default()).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        let c = LossComponents {
            triplet: 2.0,
            softmax: 3.0,
            generator: 5.0,
            critic: 7.0,
        };
        let w = LossWeights {
            generator: 0.0,
            critic: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&c, &w).unwrap(), 0.1 * 2.0 + 0.2 * 3.0);
        let bad = LossComponents {
            critic: f64::NAN,
            ..c
        };
        assert!(matches!(total_loss(&bad, &w), Err(Error::NonFinite { name: "L_D", .. })));
    }
}

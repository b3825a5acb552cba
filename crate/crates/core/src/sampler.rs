//! Triplet construction.
//!
//! Each epoch selects `n` speakers. For every selected speaker it draws `A`
//! anchors, `P` positives per anchor and `K` other speakers (from the same
//! `n`), then `J` negatives from each other speaker for every
//! anchor–positive pair: `n·A·P·K·J` triplets in total. One anchor speaker
//! forms one [`TripletBatch`].
//!
//! Negatives are either drawn uniformly at random or mined as semi-hard
//! negatives: for cosine distances `d`, the preferred negatives satisfy
//! `d(a,p) < d(a,n) < d(a,p) + α`. When none exists the nearest negative
//! that is still no closer than the positive is used, and failing that the
//! farthest of the remaining (hard) negatives; such picks are flagged.

use std::collections::HashMap;
use std::io::Write;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Margin, SamplingMode, SamplingPlan};
use crate::error::{Error, Result};
use crate::featio::FeatureSet;
use crate::losses::{cosine_distance, Triple};
use crate::nets::{batch_from_matrices, EncoderNet};

/// Triples indexing into a local slice list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletBatch {
    /// Global slice indices into the feature set.
    pub slices: Vec<usize>,
    /// `(anchor, positive, negative)` positions within `slices`.
    pub triples: Vec<Triple>,
    /// Whether each negative came from the semi-hard fallback path.
    pub fallback: Vec<bool>,
}

impl TripletBatch {
    /// Build from global triples, deduplicating slices in first-use order.
    pub fn from_global(global: &[Triple], fallback: Vec<bool>) -> Self {
        let mut slices = Vec::new();
        let mut pos: HashMap<usize, usize> = HashMap::new();
        let mut local = |g: usize, slices: &mut Vec<usize>| {
            *pos.entry(g).or_insert_with(|| {
                slices.push(g);
                slices.len() - 1
            })
        };
        let triples = global
            .iter()
            .map(|&(a, p, n)| {
                let a = local(a, &mut slices);
                let p = local(p, &mut slices);
                let n = local(n, &mut slices);
                (a, p, n)
            })
            .collect();
        Self {
            slices,
            triples,
            fallback,
        }
    }

    pub fn global_triples(&self) -> Vec<Triple> {
        self.triples
            .iter()
            .map(|&(a, p, n)| (self.slices[a], self.slices[p], self.slices[n]))
            .collect()
    }

    /// Concatenate several batches into one.
    pub fn merge(batches: &[TripletBatch]) -> Self {
        let global: Vec<Triple> = batches.iter().flat_map(|b| b.global_triples()).collect();
        let fallback = batches.iter().flat_map(|b| b.fallback.iter().copied()).collect();
        Self::from_global(&global, fallback)
    }

    /// Check the speaker constraints of every triple.
    pub fn validate(&self, features: &FeatureSet) -> Result<()> {
        for &(a, p, n) in &self.global_triples() {
            let (la, lp, ln) = (features.label_of(a), features.label_of(p), features.label_of(n));
            if a == p || la != lp || la == ln {
                return Err(Error::Sampling(format!(
                    "invalid triple ({a}, {p}, {n}) with labels ({la}, {lp}, {ln})"
                )));
            }
        }
        Ok(())
    }

    /// One audit line per triple: `anchor positive negative fallback`.
    pub fn write_audit<W: Write>(&self, out: &mut W, features: &FeatureSet) -> std::io::Result<()> {
        for (&(a, p, n), fb) in self.global_triples().iter().zip(&self.fallback) {
            let id = |i: usize| {
                let s = &features.slices[i];
                format!("{}#{}", s.utterance_id, s.slice_index)
            };
            writeln!(out, "{} {} {} {}", id(a), id(p), id(n), u8::from(*fb))?;
        }
        Ok(())
    }
}

/// `n·A·P·K·J` for a plan with an explicit speaker count.
pub fn epoch_pair_count(plan: &SamplingPlan) -> Result<u64> {
    let n = plan
        .speakers
        .ok_or_else(|| Error::Config("speakers_per_epoch is `all`; resolve it against a corpus first".into()))?;
    plan.validate()?;
    Ok([n, plan.anchors, plan.positives, plan.other_classes, plan.negatives]
        .iter()
        .map(|&v| v as u64)
        .product())
}

/// Preference key of a candidate negative: lower is better.
fn semi_hard_rank(d_ap: f64, d_an: f64, margin: f64) -> (u8, f64) {
    if d_an > d_ap && d_an < d_ap + margin {
        (0, d_an)
    } else if d_an >= d_ap {
        (1, d_an)
    } else {
        (2, -d_an)
    }
}

/// Pick `count` negatives for `(anchor, positive)` among `candidates`
/// (row indices of `embeddings`). Returns `(index, fallback)` pairs;
/// candidates are reused cyclically when fewer than `count` exist.
pub fn select_semi_hard(
    embeddings: &Array2<f64>,
    anchor: usize,
    positive: usize,
    candidates: &[usize],
    count: usize,
    margin: Margin,
) -> Vec<(usize, bool)> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let row = |i: usize| embeddings.row(i).to_vec();
    let (ea, ep) = (row(anchor), row(positive));
    let d_ap = cosine_distance(&ea, &ep);
    let mut ranked: Vec<((u8, f64), usize)> = candidates
        .iter()
        .map(|&c| (semi_hard_rank(d_ap, cosine_distance(&ea, &row(c)), margin.0), c))
        .collect();
    ranked.sort_by(|x, y| {
        x.0 .0
            .cmp(&y.0 .0)
            .then(x.0 .1.total_cmp(&y.0 .1))
            .then(x.1.cmp(&y.1))
    });
    (0..count)
        .map(|i| {
            let ((tier, _), c) = ranked[i % ranked.len()];
            (c, tier > 0)
        })
        .collect()
}

/// Mine one negative for every ordered same-speaker pair of a batch.
pub fn mine_batch(embeddings: &Array2<f64>, labels: &[usize], margin: Margin) -> Vec<(Triple, bool)> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        let negatives: Vec<usize> = (0..n).filter(|&i| labels[i] != labels[a]).collect();
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            if let Some(&(neg, fb)) = select_semi_hard(embeddings, a, p, &negatives, 1, margin).first() {
                out.push(((a, p, neg), fb));
            }
        }
    }
    out
}

/// Random choices for one anchor speaker, shared by both modes.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupDraw {
    pub anchor_class: usize,
    /// `A·P` anchor–positive pairs (global slice indices).
    pub pairs: Vec<(usize, usize)>,
    pub other_classes: Vec<usize>,
    /// `pairs × other_classes × J` random negatives, in that nesting order.
    pub random_negatives: Vec<usize>,
    /// Candidate pool per other class for semi-hard mining.
    pub pools: Vec<Vec<usize>>,
}

fn choose<R: Rng>(rng: &mut R, from: &[usize], k: usize) -> Vec<usize> {
    if from.len() >= k {
        from.choose_multiple(rng, k).copied().collect()
    } else {
        (0..k).map(|_| *from.choose(rng).expect("non-empty")).collect()
    }
}

/// Plans and resolves triplet batches over one feature set.
pub struct Sampler<'a> {
    plan: SamplingPlan,
    margin: Margin,
    features: &'a FeatureSet,
    by_class: Vec<Vec<usize>>,
    eligible: Vec<usize>,
    speakers: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(plan: &SamplingPlan, margin: Margin, features: &'a FeatureSet) -> Result<Self> {
        plan.validate()?;
        let by_class = features.by_speaker();
        let mut eligible = Vec::new();
        for (c, slices) in by_class.iter().enumerate() {
            if slices.len() >= 2 {
                eligible.push(c);
            } else {
                log::warn!(
                    "speaker {} has {} slice(s); skipped for triplet sampling",
                    features.speakers()[c],
                    slices.len()
                );
            }
        }
        if eligible.len() < 2 {
            return Err(Error::Sampling(format!(
                "need at least 2 speakers with >= 2 slices, found {}",
                eligible.len()
            )));
        }
        let speakers = plan.speakers.unwrap_or(eligible.len());
        if speakers > eligible.len() {
            return Err(Error::Sampling(format!(
                "plan asks for {speakers} speakers per epoch but only {} are eligible",
                eligible.len()
            )));
        }
        if plan.other_classes >= speakers {
            return Err(Error::Sampling(format!(
                "other_classes ({}) must be below the {speakers} speakers per epoch",
                plan.other_classes
            )));
        }
        Ok(Self {
            plan: plan.clone(),
            margin,
            features,
            by_class,
            eligible,
            speakers,
        })
    }

    pub fn speakers_per_epoch(&self) -> usize {
        self.speakers
    }

    pub fn epoch_pair_count(&self) -> u64 {
        let p = &self.plan;
        [self.speakers, p.anchors, p.positives, p.other_classes, p.negatives]
            .iter()
            .map(|&v| v as u64)
            .product()
    }

    fn epoch_rng(&self, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed);
        rng.set_stream(epoch.wrapping_add(1));
        rng
    }

    /// Random draws for every anchor speaker of `epoch`.
    pub fn epoch_groups(&self, epoch: u64) -> Vec<GroupDraw> {
        let mut rng = self.epoch_rng(epoch);
        let p = &self.plan;
        let mut chosen = self.eligible.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(self.speakers);
        chosen
            .iter()
            .map(|&cls| {
                let own = &self.by_class[cls];
                let mut pairs = Vec::with_capacity(p.anchors * p.positives);
                for a in choose(&mut rng, own, p.anchors) {
                    let rest: Vec<usize> = own.iter().copied().filter(|&s| s != a).collect();
                    for pos in choose(&mut rng, &rest, p.positives) {
                        pairs.push((a, pos));
                    }
                }
                let others: Vec<usize> = chosen.iter().copied().filter(|&c| c != cls).collect();
                let other_classes = choose(&mut rng, &others, p.other_classes);
                let mut random_negatives = Vec::with_capacity(pairs.len() * other_classes.len() * p.negatives);
                for _ in &pairs {
                    for &k in &other_classes {
                        random_negatives.extend(choose(&mut rng, &self.by_class[k], p.negatives));
                    }
                }
                let mut used: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
                used.sort_unstable();
                used.dedup();
                let per_class = (p.mining_batch.saturating_sub(used.len()) / other_classes.len()).max(p.negatives);
                let pools = other_classes
                    .iter()
                    .map(|&k| {
                        let members = &self.by_class[k];
                        choose(&mut rng, members, per_class.min(members.len()))
                    })
                    .collect();
                GroupDraw {
                    anchor_class: cls,
                    pairs,
                    other_classes,
                    random_negatives,
                    pools,
                }
            })
            .collect()
    }

    pub fn resolve_random(&self, draw: &GroupDraw) -> TripletBatch {
        let j = self.plan.negatives;
        let mut global = Vec::with_capacity(draw.random_negatives.len());
        let mut negs = draw.random_negatives.iter();
        for &(a, p) in &draw.pairs {
            for _ in &draw.other_classes {
                for _ in 0..j {
                    global.push((a, p, *negs.next().expect("J negatives per class")));
                }
            }
        }
        let n = global.len();
        TripletBatch::from_global(&global, vec![false; n])
    }

    /// Mine negatives with inference-mode embeddings from `encoder`.
    pub fn resolve_semi_hard(&self, draw: &GroupDraw, encoder: &EncoderNet) -> Result<TripletBatch> {
        let mut members: Vec<usize> = draw.pairs.iter().flat_map(|&(a, p)| [a, p]).collect();
        members.extend(draw.pools.iter().flatten());
        let mut seen = HashMap::new();
        members.retain(|&s| seen.insert(s, ()).is_none());
        let row_of: HashMap<usize, usize> = members.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let arch = encoder.arch();
        let x = batch_from_matrices(
            members.iter().map(|&g| self.features.slices[g].matrix.as_slice()),
            arch.frames,
            arch.mels,
        )?;
        let emb = encoder.encode_batch(&x)?;
        let mut global = Vec::new();
        let mut fallback = Vec::new();
        for &(a, p) in &draw.pairs {
            for pool in &draw.pools {
                let cands: Vec<usize> = pool.iter().map(|g| row_of[g]).collect();
                for (row, fb) in select_semi_hard(&emb, row_of[&a], row_of[&p], &cands, self.plan.negatives, self.margin) {
                    global.push((a, p, members[row]));
                    fallback.push(fb);
                }
            }
        }
        Ok(TripletBatch::from_global(&global, fallback))
    }

    /// Resolve a group with the plan's mode. `encoder` is required for
    /// semi-hard mining.
    pub fn resolve(&self, draw: &GroupDraw, encoder: Option<&EncoderNet>) -> Result<TripletBatch> {
        match (self.plan.mode, encoder) {
            (SamplingMode::Random, _) => Ok(self.resolve_random(draw)),
            (SamplingMode::SemiHard, Some(enc)) => self.resolve_semi_hard(draw, enc),
            (SamplingMode::SemiHard, None) => {
                Err(Error::Sampling("semi-hard mining needs an encoder".into()))
            }
        }
    }

    pub fn features(&self) -> &FeatureSet {
        self.features
    }
}

/// All random-mode batches of one epoch.
pub fn sample_random(plan: &SamplingPlan, features: &FeatureSet, epoch: u64) -> Result<Vec<TripletBatch>> {
    let s = Sampler::new(plan, Margin::default(), features)?;
    Ok(s.epoch_groups(epoch).iter().map(|g| s.resolve_random(g)).collect())
}

/// All semi-hard batches of one epoch against a frozen encoder.
pub fn sample_semi_hard(
    plan: &SamplingPlan,
    margin: Margin,
    features: &FeatureSet,
    encoder: &EncoderNet,
    epoch: u64,
) -> Result<Vec<TripletBatch>> {
    let s = Sampler::new(plan, margin, features)?;
    s.epoch_groups(epoch)
        .iter()
        .map(|g| s.resolve_semi_hard(g, encoder))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featio::make_synthetic_corpus;
    use ndarray::array;

    fn plan(n: usize, a: usize, p: usize, k: usize, j: usize) -> SamplingPlan {
        SamplingPlan {
            speakers: Some(n),
            anchors: a,
            positives: p,
            other_classes: k,
            negatives: j,
            ..SamplingPlan::default()
        }
    }

    #[test]
    fn pair_count_formula() {
        assert_eq!(epoch_pair_count(&plan(60, 2, 2, 5, 3)).unwrap(), 3600);
        assert_eq!(epoch_pair_count(&plan(2, 1, 1, 1, 1)).unwrap(), 2);
        assert!(epoch_pair_count(&plan(60, 0, 2, 5, 3)).is_err());
        assert!(epoch_pair_count(&plan(1252, 2, 2, 5, 3)).is_ok());
    }

    #[test]
    fn smallest_plan_yields_two_triples() {
        let fs = make_synthetic_corpus(3, 3, 1).unwrap();
        let batches = sample_random(&plan(2, 1, 1, 1, 1), &fs, 0).unwrap();
        let total: usize = batches.iter().map(|b| b.triples.len()).sum();
        assert_eq!(total, 2);
        batches.iter().for_each(|b| b.validate(&fs).unwrap());
    }

    #[test]
    fn too_few_eligible_speakers_is_an_error() {
        let fs = make_synthetic_corpus(3, 1, 1).unwrap();
        assert!(matches!(
            Sampler::new(&plan(2, 1, 1, 1, 1), Margin::default(), &fs),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn in_window_negative_is_preferred() {
        // d(a,p) = 0.1; candidate 1 at d = 0.2 (in window), candidate 2 at d = 0.5.
        let cos = |d: f64| [1.0 - d, (1.0 - (1.0 - d) * (1.0 - d)).sqrt()];
        let rows = [[1.0, 0.0], cos(0.1), cos(0.2), cos(0.5)];
        let e = Array2::from_shape_fn((4, 2), |(i, j)| rows[i][j]);
        let picked = select_semi_hard(&e, 0, 1, &[2, 3], 1, Margin(0.2));
        assert_eq!(picked, vec![(2, false)]);
        // Without an in-window candidate the nearest feasible one is flagged.
        let picked = select_semi_hard(&e, 0, 1, &[3], 1, Margin(0.2));
        assert_eq!(picked, vec![(3, true)]);
    }

    #[test]
    fn hard_negatives_only_fall_back_to_farthest() {
        let e = array![[1.0, 0.0], [0.0, 1.0], [0.8, 0.6], [0.6, 0.8]];
        // d(a,p) = 1; candidates at 0.2 and 0.4, both closer than the positive.
        let picked = select_semi_hard(&e, 0, 1, &[2, 3], 2, Margin(0.2));
        assert_eq!(picked, vec![(3, true), (2, true)]);
    }
}

//! Enrollment, cosine scoring, EER, best-threshold accuracy and DET curves.
//!
//! A trial is accepted when `score >= threshold`. Operating points are
//! evaluated at every distinct score plus `+∞`, so the sweep starts at
//! `(FAR, FRR) = (1, 0)` and ends at `(0, 1)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::featio::FeatureSet;
use crate::nets::{batch_from_matrices, Embedding, EncoderNet};

/// Enrolled speaker: normalized mean of its enrollment embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerModel {
    pub speaker_id: String,
    pub centroid: Vec<f64>,
    pub n_enroll: usize,
    #[serde(default)]
    pub enroll_utterances: Vec<String>,
}

impl SpeakerModel {
    pub fn centroid(&self) -> Embedding {
        Embedding::from_unit(self.centroid.clone())
    }
}

fn mean_direction(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Config("enrollment needs at least one embedding".into()))?;
    let mut sum = vec![0.0; first.dim()];
    for e in embeddings {
        if e.dim() != sum.len() {
            return Err(Error::shape(format!("{}-d embedding", sum.len()), e.dim()));
        }
        sum.iter_mut().zip(e.as_slice()).for_each(|(s, v)| *s += v);
    }
    let n = embeddings.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(Embedding::new(sum))
}

/// Build a model from precomputed embeddings.
pub fn enroll_embeddings(speaker_id: &str, embeddings: &[Embedding]) -> Result<SpeakerModel> {
    Ok(SpeakerModel {
        speaker_id: speaker_id.to_string(),
        centroid: mean_direction(embeddings)?.into_vec(),
        n_enroll: embeddings.len(),
        enroll_utterances: Vec::new(),
    })
}

/// Embed every slice of `slices` (indices into `features`) in inference mode.
pub fn embed_slices(encoder: &EncoderNet, features: &FeatureSet, slices: &[usize]) -> Result<Vec<Embedding>> {
    let arch = encoder.arch();
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(64) {
        let x = batch_from_matrices(
            chunk.iter().map(|&i| features.slices[i].matrix.as_slice()),
            arch.frames,
            arch.mels,
        )?;
        let e = encoder.encode_batch(&x)?;
        out.extend(e.rows().into_iter().map(|r| Embedding::from_unit(r.to_vec())));
    }
    Ok(out)
}

/// Enroll one speaker from slices of its enrollment utterances.
pub fn enroll(encoder: &EncoderNet, features: &FeatureSet, slices: &[usize]) -> Result<SpeakerModel> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Config("enrollment needs at least one slice".into()))?;
    let speaker = features.slices[*first].speaker_id.clone();
    if slices.iter().any(|&i| features.slices[i].speaker_id != speaker) {
        return Err(Error::Config("enrollment slices span several speakers".into()));
    }
    let emb = embed_slices(encoder, features, slices)?;
    let mut model = enroll_embeddings(&speaker, &emb)?;
    let mut utts: Vec<String> = slices.iter().map(|&i| features.slices[i].utterance_id.clone()).collect();
    utts.dedup();
    model.n_enroll = utts.len();
    model.enroll_utterances = utts;
    Ok(model)
}

/// Cosine similarity between a model and a unit-norm test embedding.
pub fn score_trial(model: &SpeakerModel, test: &Embedding) -> f64 {
    model.centroid.iter().zip(test.as_slice()).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub model_id: String,
    pub test_id: String,
    pub score: f64,
    pub target: bool,
}

/// Scored enroll/test trials.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialScoreSet {
    pub trials: Vec<Trial>,
}

/// A test item: identifier, true speaker and embedding.
#[derive(Clone, Debug)]
pub struct TestItem {
    pub test_id: String,
    pub speaker_id: String,
    pub embedding: Embedding,
}

/// Score every test item against every model.
pub fn build_trials(models: &[SpeakerModel], tests: &[TestItem]) -> TrialScoreSet {
    let mut trials = Vec::with_capacity(models.len() * tests.len());
    for m in models {
        for t in tests {
            trials.push(Trial {
                model_id: m.speaker_id.clone(),
                test_id: t.test_id.clone(),
                score: score_trial(m, &t.embedding),
                target: m.speaker_id == t.speaker_id,
            });
        }
    }
    TrialScoreSet { trials }
}

impl TrialScoreSet {
    pub fn from_pairs(pairs: &[(f64, bool)]) -> Self {
        Self {
            trials: pairs
                .iter()
                .enumerate()
                .map(|(i, &(score, target))| Trial {
                    model_id: String::new(),
                    test_id: i.to_string(),
                    score,
                    target,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// CSV with header `model_id,test_id,score,target`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id,test_id,score,target\n");
        for t in &self.trials {
            let _ = writeln!(out, "{},{},{},{}", t.model_id, t.test_id, t.score, u8::from(t.target));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "model_id,test_id,score,target" => {}
            other => return Err(Error::Trials(format!("unexpected trial header {other:?}"))),
        }
        let mut trials = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.trim().split(',').collect();
            let bad = || Error::Trials(format!("line {}: malformed trial {line:?}", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let score: f64 = f[2].parse().map_err(|_| bad())?;
            let target = match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            trials.push(Trial {
                model_id: f[0].to_string(),
                test_id: f[1].to_string(),
                score,
                target,
            });
        }
        Ok(Self { trials })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// One operating point of the threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Full sweep over distinct scores and `+∞`, thresholds ascending.
pub fn operating_points(trials: &TrialScoreSet) -> Result<Vec<OperatingPoint>> {
    let n_tar = trials.trials.iter().filter(|t| t.target).count();
    let n_non = trials.trials.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::Trials(format!(
            "need both target and non-target trials (got {n_tar} / {n_non})"
        )));
    }
    if let Some(t) = trials.trials.iter().find(|t| !t.score.is_finite()) {
        return Err(Error::Trials(format!("non-finite score {} in trial {}", t.score, t.test_id)));
    }
    let mut sorted: Vec<(f64, bool)> = trials.trials.iter().map(|t| (t.score, t.target)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    // Trials strictly below the current threshold.
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        points.push(OperatingPoint {
            threshold: t,
            far: (n_non - non_below) as f64 / n_non as f64,
            frr: tar_below as f64 / n_tar as f64,
        });
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// Locate the FAR/FRR crossing on an ascending sweep, interpolating
/// linearly between the bracketing points. Returns `(eer, threshold)`.
pub fn eer_from_points(points: &[OperatingPoint]) -> (f64, f64) {
    let i = points
        .iter()
        .position(|p| p.frr >= p.far)
        .expect("the +inf point always has frr >= far");
    if i == 0 {
        return (points[0].far, points[0].threshold);
    }
    let (lo, hi) = (points[i - 1], points[i]);
    let a = lo.far - lo.frr;
    let b = hi.far - hi.frr;
    let lambda = a / (a - b);
    let eer = lo.far + lambda * (hi.far - lo.far);
    let threshold = if hi.threshold.is_finite() {
        lo.threshold + lambda * (hi.threshold - lo.threshold)
    } else {
        lo.threshold
    };
    (eer, threshold)
}

/// Equal error rate and the interpolated threshold where it occurs.
pub fn compute_eer(trials: &TrialScoreSet) -> Result<(f64, f64)> {
    let (eer, thr) = eer_from_points(&operating_points(trials)?);
    if eer > 0.5 {
        log::warn!("EER {eer:.3} above 0.5: scores look inverted (higher should mean same speaker)");
    }
    Ok((eer, thr))
}

/// Best verification accuracy over all thresholds; ties go to the lowest
/// threshold. Returns `(accuracy, threshold)`.
pub fn compute_accuracy(trials: &TrialScoreSet) -> Result<(f64, f64)> {
    if trials.is_empty() {
        return Err(Error::Trials("no trials".into()));
    }
    let n = trials.len() as f64;
    let mut sorted: Vec<(f64, bool)> = trials.trials.iter().map(|t| (t.score, t.target)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_tar = sorted.iter().filter(|t| t.1).count();
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut best = (-1.0, f64::INFINITY);
    let mut i = 0;
    loop {
        let threshold = sorted.get(i).map_or(f64::INFINITY, |s| s.0);
        let correct = (n_tar - tar_below) + non_below;
        let acc = correct as f64 / n;
        if acc > best.0 {
            best = (acc, threshold);
        }
        if i >= sorted.len() {
            break;
        }
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    Ok(best)
}

/// Ordered `(FAR, FRR)` operating points.
#[derive(Clone, Debug, PartialEq)]
pub struct DetCurve {
    pub points: Vec<(f64, f64)>,
}

/// DET curve with at most `n_points` points (endpoints always kept).
pub fn det_curve(trials: &TrialScoreSet, n_points: usize) -> Result<DetCurve> {
    if n_points < 2 {
        return Err(Error::Trials("a DET curve needs at least 2 points".into()));
    }
    let all = operating_points(trials)?;
    let pts: Vec<(f64, f64)> = if all.len() <= n_points {
        all.iter().map(|p| (p.far, p.frr)).collect()
    } else {
        let last = all.len() - 1;
        let mut idx: Vec<usize> = (0..n_points)
            .map(|i| (i as f64 * last as f64 / (n_points - 1) as f64).round() as usize)
            .collect();
        idx.dedup();
        idx.iter().map(|&i| (all[i].far, all[i].frr)).collect()
    };
    Ok(DetCurve { points: pts })
}

impl DetCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("far,frr\n");
        for (far, frr) in &self.points {
            let _ = writeln!(out, "{far},{frr}");
        }
        out
    }

    /// Gnuplot script plotting `csv_name` on log axes.
    pub fn gnuplot_script(csv_name: &str, title: &str) -> String {
        format!(
            "set datafile separator \",\"\n\
             set key bottom left\n\
             set logscale xy\n\
             set xrange [0.001:1]\n\
             set yrange [0.001:1]\n\
             set xlabel \"False accept rate\"\n\
             set ylabel \"False reject rate\"\n\
             set grid\n\
             plot \"{csv_name}\" every ::1 using 1:2 with lines lw 2 title \"{title}\"\n"
        )
    }
}

/// Enrollment/test sizes per held-out speaker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub enroll: usize,
    pub test: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self { enroll: 3, test: 7 }
    }
}

/// Which utterances enroll each speaker and which are tested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    /// `(speaker, enrollment utterance ids)`.
    pub enroll: Vec<(String, Vec<String>)>,
    /// `(speaker, test utterance id)`.
    pub test: Vec<(String, String)>,
}

fn utterances_of(features: &FeatureSet, speaker: &str) -> Vec<String> {
    let mut utts: Vec<String> = Vec::new();
    for s in features.slices.iter().filter(|s| s.speaker_id == speaker) {
        if !utts.contains(&s.utterance_id) {
            utts.push(s.utterance_id.clone());
        }
    }
    utts
}

/// Pick held-out speakers uniformly at random; returns `(train, held_out)`.
pub fn choose_holdout(features: &FeatureSet, n: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if n >= features.num_classes() {
        return Err(Error::Config(format!(
            "cannot hold out {n} of {} speakers",
            features.num_classes()
        )));
    }
    let mut ids = features.speakers().to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_4e1d));
    let held = ids.split_off(ids.len() - n);
    let keep = |v: &[String]| {
        features
            .speakers()
            .iter()
            .filter(|s| v.contains(s))
            .cloned()
            .collect::<Vec<_>>()
    };
    Ok((keep(&ids), keep(&held)))
}

/// Randomly choose `protocol.enroll` enrollment utterances per speaker and
/// up to `protocol.test` of the rest for testing.
pub fn split_enroll_test(
    features: &FeatureSet,
    speakers: &[String],
    protocol: Protocol,
    seed: u64,
) -> Result<EvalSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7_011);
    let mut enroll = Vec::new();
    let mut test = Vec::new();
    for spk in speakers {
        let mut utts = utterances_of(features, spk);
        if utts.len() <= protocol.enroll {
            return Err(Error::Config(format!(
                "speaker {spk} has {} utterances; need more than {} for enroll + test",
                utts.len(),
                protocol.enroll
            )));
        }
        utts.shuffle(&mut rng);
        let rest = utts.split_off(protocol.enroll);
        enroll.push((spk.clone(), utts));
        test.extend(rest.into_iter().take(protocol.test).map(|u| (spk.clone(), u)));
    }
    Ok(EvalSplit { enroll, test })
}

/// Metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub accuracy: f64,
    pub accuracy_threshold: f64,
    pub trials: TrialScoreSet,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!("EER={:.2}%, ACC={:.2}%", 100.0 * self.eer, 100.0 * self.accuracy)
    }
}

/// Enroll every speaker of `split` and embed its test utterances. Multi-slice
/// utterances are pooled by averaging their slice embeddings.
pub fn enroll_and_embed_tests(
    encoder: &EncoderNet,
    features: &FeatureSet,
    split: &EvalSplit,
) -> Result<(Vec<SpeakerModel>, Vec<TestItem>)> {
    let mut by_utt: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in features.slices.iter().enumerate() {
        by_utt.entry(s.utterance_id.as_str()).or_default().push(i);
    }
    let slices_of = |utt: &str| -> Result<Vec<usize>> {
        by_utt
            .get(utt)
            .cloned()
            .ok_or_else(|| Error::Config(format!("utterance {utt} not in feature set")))
    };
    let mut models = Vec::new();
    for (spk, utts) in &split.enroll {
        let mut idx = Vec::new();
        for u in utts {
            idx.extend(slices_of(u)?);
        }
        let mut model = enroll(encoder, features, &idx)?;
        model.speaker_id = spk.clone();
        models.push(model);
    }
    let mut tests = Vec::new();
    for (spk, utt) in &split.test {
        let emb = embed_slices(encoder, features, &slices_of(utt)?)?;
        tests.push(TestItem {
            test_id: utt.clone(),
            speaker_id: spk.clone(),
            embedding: mean_direction(&emb)?,
        });
    }
    Ok((models, tests))
}

/// Full enroll/test evaluation.
pub fn evaluate(encoder: &EncoderNet, features: &FeatureSet, split: &EvalSplit) -> Result<EvalReport> {
    let (models, tests) = enroll_and_embed_tests(encoder, features, split)?;
    let trials = build_trials(&models, &tests);
    let (eer, eer_threshold) = compute_eer(&trials)?;
    let (accuracy, accuracy_threshold) = compute_accuracy(&trials)?;
    Ok(EvalReport {
        eer,
        eer_threshold,
        accuracy,
        accuracy_threshold,
        trials,
    })
}

/// One row of an embedding-dimension sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub embed_dim: usize,
    pub eer: f64,
    pub accuracy: f64,
}

/// Train and evaluate the toy pipeline once per embedding dimension on the
/// same train/held-out split.
pub fn embedding_dim_sweep(
    corpus: &FeatureSet,
    dims: &[usize],
    config: &TrainConfig,
    holdout: usize,
    protocol: Protocol,
) -> Result<Vec<SweepRow>> {
    let (train_ids, held) = choose_holdout(corpus, holdout, config.seed)?;
    let train_set = corpus.subset(&train_ids)?;
    let split = split_enroll_test(corpus, &held, protocol, config.seed)?;
    dims.iter()
        .map(|&d| {
            let mut cfg = config.clone();
            cfg.arch.embed_dim = d;
            let mut trainer = crate::trainer::Trainer::new(cfg, &train_set)?;
            trainer.run(&train_set, None)?;
            let report = evaluate(&trainer.nets.encoder, corpus, &split)?;
            Ok(SweepRow {
                embed_dim: d,
                eer: report.eer,
                accuracy: report.accuracy,
            })
        })
        .collect()
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("dim,eer,acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6}", r.embed_dim, r.eer, r.accuracy);
    }
    out
}

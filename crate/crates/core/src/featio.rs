//! Audio slicing, log-mel filterbank features, the synthetic corpus and the
//! `MTGF` feature container.
//!
//! A 2 s slice at 16 kHz is framed with a 25 ms window and a 250-sample
//! (15.625 ms) hop, so exactly 128 frames result; 128 triangular mel
//! filters give a 128 × 128 matrix. Log energies are floored at 1e-10 and
//! every slice is normalized to zero mean and unit variance.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
const MAGIC: &[u8; 4] = b"MTGF";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 20;

/// Mono waveform with amplitudes in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub speaker_id: String,
    pub utterance_id: String,
}

/// One normalized `frames × mels` log-mel matrix (row-major, frame-major).
#[derive(Clone, Debug, PartialEq)]
pub struct FbankSlice {
    pub matrix: Vec<f32>,
    pub frames: usize,
    pub mels: usize,
    pub speaker_id: String,
    pub utterance_id: String,
    pub slice_index: usize,
}

/// What a feature container holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetTag {
    Features,
    /// Generator output dumped during training.
    Fake,
}

/// Slices plus a contiguous speaker → class-label index.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub slices: Vec<FbankSlice>,
    speakers: Vec<String>,
    lookup: HashMap<String, usize>,
    pub tag: SetTag,
}

impl FeatureSet {
    /// Build the speaker index in order of first appearance.
    pub fn from_slices(slices: Vec<FbankSlice>) -> Result<Self> {
        let mut speakers = Vec::new();
        for s in &slices {
            if !speakers.contains(&s.speaker_id) {
                speakers.push(s.speaker_id.clone());
            }
        }
        Self::with_index(slices, speakers, SetTag::Features)
    }

    fn with_index(slices: Vec<FbankSlice>, speakers: Vec<String>, tag: SetTag) -> Result<Self> {
        let lookup: HashMap<String, usize> =
            speakers.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        if lookup.len() != speakers.len() {
            return Err(Error::Config("duplicate speaker id in index".into()));
        }
        if let Some(first) = slices.first() {
            let (f, m) = (first.frames, first.mels);
            for s in &slices {
                if !lookup.contains_key(&s.speaker_id) {
                    return Err(Error::Config(format!("slice speaker {:?} not in index", s.speaker_id)));
                }
                if (s.frames, s.mels) != (f, m) || s.matrix.len() != f * m {
                    return Err(Error::shape(format!("{f}x{m} slices"), format!("{}x{}", s.frames, s.mels)));
                }
            }
        }
        Ok(Self {
            slices,
            speakers,
            lookup,
            tag,
        })
    }

    pub fn with_tag(mut self, tag: SetTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.speakers.len()
    }

    /// Speaker ids ordered by class label.
    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn label(&self, speaker_id: &str) -> Option<usize> {
        self.lookup.get(speaker_id).copied()
    }

    pub fn label_of(&self, slice: usize) -> usize {
        self.lookup[&self.slices[slice].speaker_id]
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.slices.len()).map(|i| self.label_of(i)).collect()
    }

    /// `(frames, mels)` of the contained slices, if any.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.slices.first().map(|s| (s.frames, s.mels))
    }

    /// Slice indices grouped by class label.
    pub fn by_speaker(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.speakers.len()];
        for i in 0..self.slices.len() {
            groups[self.label_of(i)].push(i);
        }
        groups
    }

    /// Keep only `speakers` (in the given order), relabeled `0..len`.
    pub fn subset(&self, speakers: &[String]) -> Result<FeatureSet> {
        for s in speakers {
            if !self.lookup.contains_key(s) {
                return Err(Error::Config(format!("unknown speaker {s:?}")));
            }
        }
        let slices = self
            .slices
            .iter()
            .filter(|s| speakers.contains(&s.speaker_id))
            .cloned()
            .collect();
        Self::with_index(slices, speakers.to_vec(), self.tag)
    }
}

/// Split a waveform into fixed-length segments; a trailing remainder
/// shorter than one slice is dropped.
pub fn slice_utterance(utt: &Utterance, slice_seconds: f64, hop_seconds: f64) -> Result<Vec<Vec<f32>>> {
    if !(slice_seconds > 0.0 && hop_seconds > 0.0) {
        return Err(Error::Config("slice and hop durations must be positive".into()));
    }
    if utt.sample_rate == 0 {
        return Err(Error::Audio("sample rate must be positive".into()));
    }
    let sr = utt.sample_rate as f64;
    let len = (slice_seconds * sr).round() as usize;
    let hop = ((hop_seconds * sr).round() as usize).max(1);
    let n = utt.samples.len();
    if len == 0 || n < len {
        return Ok(Vec::new());
    }
    let count = (n - len) / hop + 1;
    Ok((0..count)
        .map(|i| utt.samples[i * hop..i * hop + len].to_vec())
        .collect())
}

/// Front-end settings.
#[derive(Clone, Debug, PartialEq)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub slice_seconds: f64,
    pub n_frames: usize,
    pub n_mels: usize,
    pub window_seconds: f64,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            slice_seconds: 2.0,
            n_frames: 128,
            n_mels: 128,
            window_seconds: 0.025,
            // 15.6 Hz bins keep the narrowest low-frequency mel filters non-empty.
            n_fft: 1024,
            f_min: 0.0,
            f_max: DEFAULT_SAMPLE_RATE as f64 / 2.0,
            log_floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn slice_samples(&self) -> usize {
        (self.slice_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        self.slice_samples() / self.n_frames
    }

    pub fn window_samples(&self) -> usize {
        (self.window_seconds * self.sample_rate as f64).round() as usize
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters.
pub fn mel_center_frequencies(cfg: &FbankConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &FbankConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Log-mel filterbank extractor with precomputed window, filters and FFT plan.
pub struct FbankExtractor {
    cfg: FbankConfig,
    window: Vec<f64>,
    /// `n_mels × (n_fft/2 + 1)` triangular weights, peak 1.
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl FbankExtractor {
    pub fn new(cfg: FbankConfig) -> Result<Self> {
        let win = cfg.window_samples();
        if cfg.n_frames == 0 || cfg.n_mels == 0 || win == 0 || cfg.n_fft < win {
            return Err(Error::Config(format!("invalid filterbank configuration {cfg:?}")));
        }
        if cfg.hop_samples() == 0 {
            return Err(Error::Config("slice too short for the requested frame count".into()));
        }
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos())
            .collect();
        let bins = cfg.n_fft / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let edges = mel_edges(&cfg);
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= c {
                            (f - lo) / (c - lo)
                        } else {
                            (hi - f) / (hi - c)
                        }
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    /// Log-mel energies before normalization, `n_frames × n_mels`.
    pub fn log_mel(&self, segment: &[f32]) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        if segment.len() != cfg.slice_samples() {
            return Err(Error::shape(format!("{} samples", cfg.slice_samples()), segment.len()));
        }
        let hop = cfg.hop_samples();
        let bins = cfg.n_fft / 2 + 1;
        let mut out = Vec::with_capacity(cfg.n_frames * cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; bins];
        for t in 0..cfg.n_frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            // Frames running past the end of the slice are zero-padded.
            for (i, w) in self.window.iter().enumerate() {
                if let Some(&s) = segment.get(t * hop + i) {
                    buf[i].re = s as f64 * w;
                }
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push(e.max(cfg.log_floor).ln());
            }
        }
        Ok(out)
    }

    /// Normalized log-mel matrix for one slice-length segment.
    pub fn compute(&self, segment: &[f32]) -> Result<Vec<f32>> {
        let mut m = self.log_mel(segment)?;
        normalize(&mut m);
        Ok(m.into_iter().map(|v| v as f32).collect())
    }

    /// Slice an utterance (hop = slice length) and featurize every slice.
    pub fn extract(&self, utt: &Utterance) -> Result<Vec<FbankSlice>> {
        if utt.sample_rate != self.cfg.sample_rate {
            return Err(Error::Audio(format!(
                "{}: sample rate {} Hz, expected {} Hz",
                utt.utterance_id, utt.sample_rate, self.cfg.sample_rate
            )));
        }
        let secs = self.cfg.slice_seconds;
        slice_utterance(utt, secs, secs)?
            .iter()
            .enumerate()
            .map(|(i, seg)| {
                Ok(FbankSlice {
                    matrix: self.compute(seg)?,
                    frames: self.cfg.n_frames,
                    mels: self.cfg.n_mels,
                    speaker_id: utt.speaker_id.clone(),
                    utterance_id: utt.utterance_id.clone(),
                    slice_index: i,
                })
            })
            .collect()
    }
}

/// Convenience wrapper using the default front end.
pub fn compute_fbank(segment: &[f32]) -> Result<Vec<f32>> {
    FbankExtractor::new(FbankConfig::default())?.compute(segment)
}

/// Zero mean, unit variance; a (near-)constant matrix is only centered.
pub fn normalize(m: &mut [f64]) {
    let n = m.len() as f64;
    let mean = m.iter().sum::<f64>() / n;
    let var = m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let div = if std < 1e-8 { 1.0 } else { std };
    m.iter_mut().for_each(|v| *v = (*v - mean) / div);
}

/// Read a 16-bit PCM mono WAV file.
pub fn read_wav(path: &Path, speaker_id: &str, utterance_id: &str) -> Result<Utterance> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{}: {} channels; only mono audio is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!("{}: only 16-bit PCM is supported", path.display())));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok(Utterance {
        samples,
        sample_rate: spec.sample_rate,
        speaker_id: speaker_id.to_string(),
        utterance_id: utterance_id.to_string(),
    })
}

/// Parameters of the synthetic speaker corpus.
///
/// Each speaker owns a persistent spectral envelope (a few formant-like
/// bumps, a spectral tilt and a harmonic ripple). Every utterance overlays
/// a phone sequence drawn from an inventory shared by all speakers, a
/// random per-utterance channel response, frame loudness jitter and white
/// noise, all in the log-mel domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Consecutive slices cut from each utterance.
    pub slices_per_utterance: usize,
    pub seed: u64,
    pub frames: usize,
    pub mels: usize,
    pub formants: usize,
    pub phones: usize,
    /// Scale of the speaker envelope relative to the nuisance terms.
    pub speaker_strength: f64,
    pub channel_strength: f64,
    pub noise_std: f64,
}

impl SyntheticCorpus {
    pub fn new(n_speakers: usize, utts_per_speaker: usize, seed: u64) -> Self {
        Self {
            n_speakers,
            utts_per_speaker,
            slices_per_utterance: 1,
            seed,
            frames: 128,
            mels: 128,
            formants: 4,
            phones: 16,
            speaker_strength: 1.0,
            channel_strength: 0.8,
            noise_std: 0.6,
        }
    }

    pub fn generate(&self) -> Result<FeatureSet> {
        if self.n_speakers < 2 {
            return Err(Error::Config(format!(
                "synthetic corpus needs at least 2 speakers, got {}",
                self.n_speakers
            )));
        }
        if self.utts_per_speaker == 0 || self.slices_per_utterance == 0 || self.frames == 0 || self.mels == 0 {
            return Err(Error::Config("utterance count and matrix size must be >= 1".into()));
        }
        let (frames, mels) = (self.frames, self.mels);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let bump = |center: f64, width: f64, m: usize| {
            let d = (m as f64 - center) / width;
            (-0.5 * d * d).exp()
        };

        let inventory: Vec<Vec<f64>> = (0..self.phones)
            .map(|_| {
                let k = rng.random_range(1..=3);
                let parts: Vec<(f64, f64, f64)> = (0..k)
                    .map(|_| {
                        (
                            rng.random_range(0.0..mels as f64),
                            rng.random_range(2.0..8.0) * mels as f64 / 128.0,
                            rng.random_range(0.5..1.5),
                        )
                    })
                    .collect();
                (0..mels)
                    .map(|m| parts.iter().map(|&(c, w, a)| a * bump(c, w, m)).sum())
                    .collect()
            })
            .collect();

        let mut slices = Vec::with_capacity(self.n_speakers * self.utts_per_speaker);
        for s in 0..self.n_speakers {
            let formants: Vec<(f64, f64, f64)> = (0..self.formants)
                .map(|_| {
                    (
                        rng.random_range(0.05..0.95) * mels as f64,
                        rng.random_range(3.0..10.0) * mels as f64 / 128.0,
                        rng.random_range(0.6..1.4),
                    )
                })
                .collect();
            let tilt: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5;
            let period = rng.random_range(4.0..10.0) * mels as f64 / 128.0;
            let phase = rng.random_range(0.0..2.0 * PI);
            let envelope: Vec<f64> = (0..mels)
                .map(|m| {
                    let x = m as f64 / mels as f64 - 0.5;
                    let f: f64 = formants.iter().map(|&(c, w, a)| a * bump(c, w, m)).sum();
                    let ripple = 0.3 * (2.0 * PI * m as f64 / period + phase).cos();
                    self.speaker_strength * (f + tilt * x + ripple)
                })
                .collect();

            for u in 0..self.utts_per_speaker {
                let ch_tilt: f64 = rng.sample::<f64, _>(StandardNormal);
                let ch_freq = rng.random_range(0.5..2.5);
                let ch_phase = rng.random_range(0.0..2.0 * PI);
                let channel: Vec<f64> = (0..mels)
                    .map(|m| {
                        let x = m as f64 / mels as f64;
                        self.channel_strength
                            * (0.5 * ch_tilt * (x - 0.5) + 0.5 * (2.0 * PI * ch_freq * x + ch_phase).sin())
                    })
                    .collect();
                let noise = Normal::new(0.0, self.noise_std).expect("finite std");
                let total = frames * self.slices_per_utterance;
                let mut matrix = Vec::with_capacity(total * mels);
                let mut t = 0;
                while t < total {
                    let len = rng.random_range(6..=18).min(total - t);
                    let phone = &inventory[rng.random_range(0..self.phones)];
                    let gain = rng.random_range(0.6..1.4);
                    for _ in 0..len {
                        let loud: f64 = 0.3 * rng.sample::<f64, _>(StandardNormal);
                        for m in 0..mels {
                            let v = envelope[m] + gain * phone[m] + channel[m] + loud
                                + noise.sample(&mut rng);
                            matrix.push(v);
                        }
                    }
                    t += len;
                }
                for (i, chunk) in matrix.chunks_exact_mut(frames * mels).enumerate() {
                    normalize(chunk);
                    slices.push(FbankSlice {
                        matrix: chunk.iter().map(|&v| v as f32).collect(),
                        frames,
                        mels,
                        speaker_id: format!("spk{s:04}"),
                        utterance_id: format!("spk{s:04}-utt{u:03}"),
                        slice_index: i,
                    });
                }
            }
        }
        FeatureSet::from_slices(slices)
    }
}

/// Default-shaped synthetic corpus: one 128 × 128 slice per utterance.
pub fn make_synthetic_corpus(n_speakers: usize, utts_per_speaker: usize, seed: u64) -> Result<FeatureSet> {
    SyntheticCorpus::new(n_speakers, utts_per_speaker, seed).generate()
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    speaker: String,
    utterance: String,
    slice: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    tag: SetTag,
    speakers: Vec<String>,
    slices: Vec<IndexEntry>,
}

/// Serialize to the `MTGF` container:
///
/// ```text
/// "MTGF" | version u16 | reserved u16 | n_slices u32 | frames u32 | mels u32
/// | n_slices·frames·mels × f32 | index_len u32 | JSON index
/// ```
///
/// All integers and floats little-endian.
pub fn encode_features(fs: &FeatureSet) -> Vec<u8> {
    let (frames, mels) = fs.shape().unwrap_or((0, 0));
    let mut out = Vec::with_capacity(HEADER_LEN + fs.len() * frames * mels * 4 + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(fs.len() as u32).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(mels as u32).to_le_bytes());
    for s in &fs.slices {
        for v in &s.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = Index {
        tag: fs.tag,
        speakers: fs.speakers.clone(),
        slices: fs
            .slices
            .iter()
            .map(|s| IndexEntry {
                speaker: s.speaker_id.clone(),
                utterance: s.utterance_id.clone(),
                slice: s.slice_index,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&index).expect("index serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

pub fn decode_features(bytes: &[u8], name: &str) -> Result<FeatureSet> {
    let err = |offset: usize, reason: String| Error::Parse {
        file: name.to_string(),
        offset: offset as u64,
        reason,
    };
    let need = |offset: usize, len: usize, what: &str| -> Result<()> {
        if bytes.len() < offset + len {
            Err(err(
                bytes.len(),
                format!("truncated: {what} needs {len} bytes at offset {offset}"),
            ))
        } else {
            Ok(())
        }
    };
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;

    need(0, HEADER_LEN, "header")?;
    if &bytes[0..4] != MAGIC {
        return Err(err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let (n, frames, mels) = (u32_at(8), u32_at(12), u32_at(16));
    let per = frames
        .checked_mul(mels)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| err(12, "matrix size overflows".into()))?;
    let data_len = per
        .checked_mul(n)
        .ok_or_else(|| err(8, "data size overflows".into()))?;
    need(HEADER_LEN, data_len, "matrix data")?;
    let idx_at = HEADER_LEN + data_len;
    need(idx_at, 4, "index length")?;
    let idx_len = u32_at(idx_at);
    need(idx_at + 4, idx_len, "index")?;
    let json = &bytes[idx_at + 4..idx_at + 4 + idx_len];
    let index: Index = serde_json::from_slice(json).map_err(|e| {
        // The index is written on one line, so the column is the byte position.
        err(idx_at + 4 + e.column().saturating_sub(1), format!("index: {e}"))
    })?;
    if idx_at + 4 + idx_len != bytes.len() {
        return Err(err(idx_at + 4 + idx_len, "trailing bytes after index".into()));
    }
    if index.slices.len() != n {
        return Err(err(8, format!("header says {n} slices, index lists {}", index.slices.len())));
    }
    let mut slices = Vec::with_capacity(n);
    for (i, entry) in index.slices.into_iter().enumerate() {
        let start = HEADER_LEN + i * per;
        let matrix = bytes[start..start + per]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        slices.push(FbankSlice {
            matrix,
            frames,
            mels,
            speaker_id: entry.speaker,
            utterance_id: entry.utterance,
            slice_index: entry.slice,
        });
    }
    FeatureSet::with_index(slices, index.speakers, index.tag).map_err(|e| err(idx_at + 4, e.to_string()))
}

/// Write a feature set atomically (temp file, then rename).
pub fn save_features(fs: &FeatureSet, path: &Path) -> Result<()> {
    write_atomic(path, &encode_features(fs))
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

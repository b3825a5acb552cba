//! Training configuration and its flat `key = value` text format.
//!
//! Lines are `key = value`; `#` starts a comment. Every key is optional and
//! falls back to [`TrainConfig::default`], but unknown keys are rejected.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Weights ω₁..ω₄ of the triplet, softmax, generator and critic terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub triplet: f64,
    pub softmax: f64,
    pub generator: f64,
    pub critic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            triplet: 0.1,
            softmax: 0.2,
            generator: 0.2,
            critic: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_triplet", self.triplet),
            ("w_softmax", self.softmax),
            ("w_generator", self.generator),
            ("w_critic", self.critic),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Triplet margin α, in cosine-distance units.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Margin(pub f64);

impl Default for Margin {
    fn default() -> Self {
        Margin(0.2)
    }
}

impl Margin {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("margin must be >= 0, got {alpha}")));
        }
        Ok(Margin(alpha))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    Random,
    SemiHard,
}

impl FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplingMode::Random),
            "semi_hard" | "semi-hard" => Ok(SamplingMode::SemiHard),
            _ => Err(Error::Config(format!("unknown sampling mode {s:?}"))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Random => "random",
            SamplingMode::SemiHard => "semi_hard",
        })
    }
}

/// Per-epoch triplet sampling scheme: `n` speakers, `A` anchors each, `P`
/// positives per anchor, `K` other speakers and `J` negatives per other
/// speaker, for `n·A·P·K·J` triplets per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    /// `None` selects every eligible speaker each epoch.
    pub speakers: Option<usize>,
    pub anchors: usize,
    pub positives: usize,
    pub other_classes: usize,
    pub negatives: usize,
    pub mode: SamplingMode,
    /// Slices embedded together when mining semi-hard negatives.
    pub mining_batch: usize,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            speakers: None,
            anchors: 2,
            positives: 2,
            other_classes: 4,
            negatives: 2,
            mode: SamplingMode::Random,
            mining_batch: 64,
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("speakers_per_epoch", self.speakers.unwrap_or(1)),
            ("anchors", self.anchors),
            ("positives", self.positives),
            ("other_classes", self.other_classes),
            ("negatives", self.negatives),
            ("mining_batch", self.mining_batch),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if let Some(n) = self.speakers {
            if self.other_classes >= n {
                return Err(Error::Config(format!(
                    "other_classes ({}) must be smaller than speakers_per_epoch ({n})",
                    self.other_classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletReduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adversarial {
    /// Wasserstein critic with gradient penalty (default).
    WganGp,
    /// Original log-loss game with a sigmoid discriminator.
    LogLoss,
}

/// Network shapes shared by all four networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub frames: usize,
    pub mels: usize,
    pub embed_dim: usize,
    pub noise_dim: usize,
    pub encoder_channels: Vec<usize>,
    /// Widths of the generator feature maps from the seed grid upward;
    /// a final transposed convolution maps the last width to one channel.
    pub generator_channels: Vec<usize>,
    pub critic_channels: Vec<usize>,
    pub classifier_channels: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            frames: 128,
            mels: 128,
            embed_dim: 512,
            noise_dim: 128,
            encoder_channels: vec![16, 32, 64, 128, 256],
            generator_channels: vec![256, 128, 64, 32, 16],
            critic_channels: vec![16, 32, 64, 128, 256],
            classifier_channels: vec![16, 32, 64],
            kernel: 5,
            leaky_slope: 0.2,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.noise_dim == 0 {
            return Err(Error::Config("embed_dim and noise_dim must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        for (name, ch) in [
            ("encoder_channels", &self.encoder_channels),
            ("generator_channels", &self.generator_channels),
            ("critic_channels", &self.critic_channels),
            ("classifier_channels", &self.classifier_channels),
        ] {
            if ch.is_empty() || ch.contains(&0) {
                return Err(Error::Config(format!("{name} must be a non-empty list of widths >= 1")));
            }
        }
        let up = 1usize << self.generator_channels.len();
        if self.frames % up != 0 || self.mels % up != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{} generator upsamplings",
                self.frames,
                self.mels,
                self.generator_channels.len()
            )));
        }
        Ok(())
    }
}

/// Every hyperparameter of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub margin: Margin,
    pub plan: SamplingPlan,
    pub arch: Architecture,
    pub lr_encoder: f64,
    pub lr_classifier: f64,
    pub lr_generator: f64,
    pub lr_critic: f64,
    /// Adam betas for encoder and classifier.
    pub beta1: f64,
    pub beta2: f64,
    /// Adam betas for generator and critic.
    pub gan_beta1: f64,
    pub gan_beta2: f64,
    pub g_steps_per_d_step: usize,
    /// Anchor speakers (sampler groups) merged into one training step.
    pub batch_speakers: usize,
    pub epochs: usize,
    pub seed: u64,
    pub use_gan: bool,
    pub use_softmax: bool,
    pub use_triplet: bool,
    pub gp_lambda: f64,
    pub triplet_reduction: TripletReduction,
    pub adversarial: Adversarial,
    /// Dump generated samples every this many steps (0 disables).
    pub dump_every: usize,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            margin: Margin::default(),
            plan: SamplingPlan::default(),
            arch: Architecture::default(),
            lr_encoder: 1e-3,
            lr_classifier: 1e-3,
            lr_generator: 1e-4,
            lr_critic: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            gan_beta1: 0.0,
            gan_beta2: 0.9,
            g_steps_per_d_step: 2,
            batch_speakers: 1,
            epochs: 20,
            seed: 0,
            use_gan: true,
            use_softmax: true,
            use_triplet: true,
            gp_lambda: 10.0,
            triplet_reduction: TripletReduction::Sum,
            adversarial: Adversarial::WganGp,
            dump_every: 0,
            checkpoint_every: 0,
        }
    }
}

/// Keys that may differ between a checkpoint and the run resuming it.
const RESUMABLE_KEYS: &[&str] = &["epochs", "dump_every", "checkpoint_every"];

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.set_seed(seed);
        self
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.plan.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        Margin::new(self.margin.0)?;
        self.plan.validate()?;
        self.arch.validate()?;
        for (name, lr) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_classifier", self.lr_classifier),
            ("lr_generator", self.lr_generator),
            ("lr_critic", self.lr_critic),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if !(self.use_gan || self.use_softmax || self.use_triplet) {
            return Err(Error::Config(
                "at least one of use_gan, use_softmax, use_triplet must be enabled".into(),
            ));
        }
        if self.g_steps_per_d_step == 0 || self.batch_speakers == 0 {
            return Err(Error::Config("g_steps_per_d_step and batch_speakers must be >= 1".into()));
        }
        if !(self.gp_lambda >= 0.0) {
            return Err(Error::Config("gp_lambda must be >= 0".into()));
        }
        Ok(())
    }

    /// Parse the flat text format. Unknown keys are rejected by name.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.plan.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse()
                .map_err(|_| format!("invalid value {v:?} for key `{key}`"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("invalid boolean {v:?} for key `{key}`")),
            }
        }
        fn list(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
            v.split(',').map(|s| num(key, s.trim())).collect()
        }
        match key {
            "w_triplet" => self.weights.triplet = num(key, value)?,
            "w_softmax" => self.weights.softmax = num(key, value)?,
            "w_generator" => self.weights.generator = num(key, value)?,
            "w_critic" => self.weights.critic = num(key, value)?,
            "margin" => self.margin = Margin(num(key, value)?),
            "speakers_per_epoch" => {
                self.plan.speakers = match value {
                    "all" => None,
                    v => Some(num(key, v)?),
                }
            }
            "anchors" => self.plan.anchors = num(key, value)?,
            "positives" => self.plan.positives = num(key, value)?,
            "other_classes" => self.plan.other_classes = num(key, value)?,
            "negatives" => self.plan.negatives = num(key, value)?,
            "sampling" => self.plan.mode = value.parse().map_err(|e: Error| e.to_string())?,
            "mining_batch" => self.plan.mining_batch = num(key, value)?,
            "frames" => self.arch.frames = num(key, value)?,
            "mels" => self.arch.mels = num(key, value)?,
            "embed_dim" => self.arch.embed_dim = num(key, value)?,
            "noise_dim" => self.arch.noise_dim = num(key, value)?,
            "encoder_channels" => self.arch.encoder_channels = list(key, value)?,
            "generator_channels" => self.arch.generator_channels = list(key, value)?,
            "critic_channels" => self.arch.critic_channels = list(key, value)?,
            "classifier_channels" => self.arch.classifier_channels = list(key, value)?,
            "kernel" => self.arch.kernel = num(key, value)?,
            "leaky_slope" => self.arch.leaky_slope = num(key, value)?,
            "lr_encoder" => self.lr_encoder = num(key, value)?,
            "lr_classifier" => self.lr_classifier = num(key, value)?,
            "lr_generator" => self.lr_generator = num(key, value)?,
            "lr_critic" => self.lr_critic = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "gan_beta1" => self.gan_beta1 = num(key, value)?,
            "gan_beta2" => self.gan_beta2 = num(key, value)?,
            "g_steps_per_d_step" => self.g_steps_per_d_step = num(key, value)?,
            "batch_speakers" => self.batch_speakers = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.set_seed(num(key, value)?),
            "use_gan" => self.use_gan = flag(key, value)?,
            "use_softmax" => self.use_softmax = flag(key, value)?,
            "use_triplet" => self.use_triplet = flag(key, value)?,
            "gp_lambda" => self.gp_lambda = num(key, value)?,
            "triplet_reduction" => {
                self.triplet_reduction = match value {
                    "sum" => TripletReduction::Sum,
                    "mean" => TripletReduction::Mean,
                    _ => return Err(format!("invalid value {value:?} for key `{key}`")),
                }
            }
            "adversarial" => {
                self.adversarial = match value {
                    "wgan_gp" => Adversarial::WganGp,
                    "log_loss" => Adversarial::LogLoss,
                    _ => return Err(format!("invalid value {value:?} for key `{key}`")),
                }
            }
            "dump_every" => self.dump_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// All settings as `(key, value)` pairs, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("w_triplet", self.weights.triplet.to_string()),
            ("w_softmax", self.weights.softmax.to_string()),
            ("w_generator", self.weights.generator.to_string()),
            ("w_critic", self.weights.critic.to_string()),
            ("margin", self.margin.0.to_string()),
            (
                "speakers_per_epoch",
                self.plan.speakers.map_or("all".to_string(), |n| n.to_string()),
            ),
            ("anchors", self.plan.anchors.to_string()),
            ("positives", self.plan.positives.to_string()),
            ("other_classes", self.plan.other_classes.to_string()),
            ("negatives", self.plan.negatives.to_string()),
            ("sampling", self.plan.mode.to_string()),
            ("mining_batch", self.plan.mining_batch.to_string()),
            ("frames", self.arch.frames.to_string()),
            ("mels", self.arch.mels.to_string()),
            ("embed_dim", self.arch.embed_dim.to_string()),
            ("noise_dim", self.arch.noise_dim.to_string()),
            ("encoder_channels", join(&self.arch.encoder_channels)),
            ("generator_channels", join(&self.arch.generator_channels)),
            ("critic_channels", join(&self.arch.critic_channels)),
            ("classifier_channels", join(&self.arch.classifier_channels)),
            ("kernel", self.arch.kernel.to_string()),
            ("leaky_slope", self.arch.leaky_slope.to_string()),
            ("lr_encoder", self.lr_encoder.to_string()),
            ("lr_classifier", self.lr_classifier.to_string()),
            ("lr_generator", self.lr_generator.to_string()),
            ("lr_critic", self.lr_critic.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("gan_beta1", self.gan_beta1.to_string()),
            ("gan_beta2", self.gan_beta2.to_string()),
            ("g_steps_per_d_step", self.g_steps_per_d_step.to_string()),
            ("batch_speakers", self.batch_speakers.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("use_gan", self.use_gan.to_string()),
            ("use_softmax", self.use_softmax.to_string()),
            ("use_triplet", self.use_triplet.to_string()),
            ("gp_lambda", self.gp_lambda.to_string()),
            (
                "triplet_reduction",
                match self.triplet_reduction {
                    TripletReduction::Sum => "sum",
                    TripletReduction::Mean => "mean",
                }
                .to_string(),
            ),
            (
                "adversarial",
                match self.adversarial {
                    Adversarial::WganGp => "wgan_gp",
                    Adversarial::LogLoss => "log_loss",
                }
                .to_string(),
            ),
            ("dump_every", self.dump_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Fails with the first differing key, ignoring run-length settings.
    pub fn ensure_compatible(&self, other: &TrainConfig) -> Result<()> {
        for ((k, a), (_, b)) in self.entries().into_iter().zip(other.entries()) {
            if a != b && !RESUMABLE_KEYS.contains(&k) {
                return Err(Error::CheckpointMismatch(format!(
                    "config key `{k}` is {a} in the checkpoint but {b} in the run"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_weights_and_margin() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.weights.triplet, c.weights.softmax, c.weights.generator, c.weights.critic),
            (0.1, 0.2, 0.2, 0.5)
        );
        assert_eq!(c.margin, Margin(0.2));
        assert_eq!(c.arch.embed_dim, 512);
        assert_eq!((c.arch.frames, c.arch.mels), (128, 128));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default().with_seed(42);
        c.plan.mode = SamplingMode::SemiHard;
        c.plan.speakers = Some(10);
        c.use_softmax = false;
        c.arch.encoder_channels = vec![4, 8];
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::parse("margin = 0.3\nlearning_rate = 1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn all_losses_disabled_is_rejected() {
        let err = TrainConfig::parse("use_gan=false\nuse_softmax=false\nuse_triplet=false").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn compatibility_ignores_epochs_only() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.epochs = 99;
        a.ensure_compatible(&b).unwrap();
        b.arch.embed_dim = 64;
        let err = a.ensure_compatible(&b).unwrap_err();
        assert!(err.to_string().contains("embed_dim"));
    }
}

//! Joint optimization of encoder, generator, critic and classifier.
//!
//! Each step runs one round over a merged triplet batch:
//!
//! 1. the encoder descends `ω₁·L_T` plus, when the GAN is enabled, the
//!    generator-path feedback `ω₃·L_G + ω₂·L_S(fake)` (the critic and
//!    classifier are only read, never updated, here);
//! 2. the classifier descends `ω₂·L_S` on real slices and on the detached
//!    fakes, each fake labeled with the speaker that conditioned it;
//! 3. the critic descends `ω₄·L_D` once;
//! 4. the generator descends `ω₃·L_G + ω₂·L_S(fake)` `g_steps_per_d_step`
//!    times with fresh noise.
//!
//! Disabled modules are never evaluated, so their parameters and running
//! statistics stay bitwise unchanged. All randomness of a step is derived
//! from `(seed, step)` and all sampling from `(seed, epoch)`, which makes a
//! resumed run identical to an uninterrupted one.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{Adversarial, TrainConfig};
use crate::error::{Error, Result};
use crate::featio::{save_features, write_atomic, FbankSlice, FeatureSet, SetTag};
use crate::losses::{
    gan_losses, gradient_penalty_at, log_gan_losses, softmax_loss, total_loss, triplet_loss_indexed,
    GanLosses, LossComponents,
};
use crate::nets::{batch_from_matrices, init_params, Networks};
use crate::nn::{Adam, Grads, Mode, Sequential};
use crate::sampler::{Sampler, TripletBatch};

/// Header of the per-step loss CSV.
pub const LOSS_CSV_HEADER: &str = "step,epoch,L_T,L_S,L_G,L_D,total";

const STEP_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

/// Losses of one completed step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// 1-based index of the step.
    pub step: u64,
    pub epoch: u64,
    pub components: LossComponents,
    pub total: f64,
}

impl LossRecord {
    /// `ω₁·L_T + ω₂·L_S`, the part of the objective owned by the encoder.
    pub fn encoder_loss(&self, config: &TrainConfig) -> f64 {
        config.weights.triplet * self.components.triplet + config.weights.softmax * self.components.softmax
    }
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in history {
        let c = &r.components;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.epoch, c.triplet, c.softmax, c.generator, c.critic, r.total
        );
    }
    out
}

/// One optimizer per network.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub encoder: Adam,
    pub generator: Adam,
    pub critic: Adam,
    pub classifier: Adam,
}

impl Optimizers {
    pub fn new(config: &TrainConfig, nets: &Networks) -> Self {
        let (b1, b2, g1, g2) = (config.beta1, config.beta2, config.gan_beta1, config.gan_beta2);
        Self {
            encoder: Adam::new(config.lr_encoder, b1, b2, &nets.encoder.net.params()),
            generator: Adam::new(config.lr_generator, g1, g2, &nets.generator.net.params()),
            critic: Adam::new(config.lr_critic, g1, g2, &nets.critic.net.params()),
            classifier: Adam::new(config.lr_classifier, b1, b2, &nets.classifier.net.params()),
        }
    }
}

/// Random draws of one step.
struct StepNoise {
    rng: ChaCha8Rng,
}

impl StepNoise {
    fn new(seed: u64, step: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ STEP_SEED_MIX);
        rng.set_stream(step);
        Self { rng }
    }

    fn normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.rng.sample(StandardNormal))
    }

    fn uniform(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.random::<f64>()).collect()
    }
}

/// Which terms contribute to an isolated encoder gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncoderTerms {
    pub triplet: bool,
    pub softmax: bool,
    pub adversarial: bool,
}

/// Inputs of one step, resolved from a triplet batch.
pub struct StepInput {
    pub x: Array4<f64>,
    pub labels: Vec<usize>,
    pub batch: TripletBatch,
}

impl StepInput {
    pub fn new(features: &FeatureSet, batch: TripletBatch) -> Result<Self> {
        if batch.triples.is_empty() {
            return Err(Error::Sampling("empty triplet batch".into()));
        }
        let (frames, mels) = features
            .shape()
            .ok_or_else(|| Error::Config("empty feature set".into()))?;
        let x = batch_from_matrices(
            batch.slices.iter().map(|&i| features.slices[i].matrix.as_slice()),
            frames,
            mels,
        )?;
        let labels = batch.slices.iter().map(|&i| features.label_of(i)).collect();
        Ok(Self { x, labels, batch })
    }
}

fn rows(a: &Array4<f64>) -> Array2<f64> {
    let n = a.shape()[0];
    let d = a.len() / n.max(1);
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, d))
        .expect("contiguous")
}

fn as4(a: Array2<f64>) -> Array4<f64> {
    let (n, d) = a.dim();
    a.into_shape_with_order((n, d, 1, 1)).expect("contiguous")
}

fn scores_grad(grad: &[f64]) -> Array4<f64> {
    Array4::from_shape_vec((grad.len(), 1, 1, 1), grad.to_vec()).expect("one score per sample")
}

fn adversarial(config: &TrainConfig, real: &[f64], fake: &[f64], gp: f64) -> GanLosses {
    match config.adversarial {
        Adversarial::WganGp => gan_losses(real, fake, gp, config.gp_lambda),
        Adversarial::LogLoss => log_gan_losses(real, fake),
    }
}

fn finite(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { name, value })
    }
}

fn finite_grads(name: &'static str, g: &Grads) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            name,
            value: f64::NAN,
        })
    }
}

fn stack(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same sample shape")
}

/// Gradient of `weight · (critic/classifier objective on fakes)` w.r.t. the
/// fakes, evaluated with the critic and classifier frozen. Returns the
/// gradient and `(L_G, L_S(fake))`.
fn fake_feedback(
    config: &TrainConfig,
    critic: &Sequential,
    classifier: &mut Sequential,
    fake: &Array4<f64>,
    labels: &[usize],
    use_adv: bool,
    use_softmax: bool,
) -> Result<(Array4<f64>, f64, f64)> {
    let w = &config.weights;
    let mut d_fake = Array4::zeros(fake.raw_dim());
    let (mut l_g, mut l_s) = (0.0, 0.0);
    if use_adv {
        // The critic has no batch norm, so a scratch copy gives a frozen trace.
        let (scores, trace) = critic.clone().forward(fake, Mode::Eval)?;
        let gl = adversarial(config, &[], &scores.into_raw_vec_and_offset().0, 0.0);
        l_g = gl.generator;
        let mut sg = scores_grad(&gl.g_fake);
        sg.mapv_inplace(|v| v * w.generator);
        d_fake += &critic.backward(&trace, sg, false).0;
    }
    if use_softmax {
        let (logits, trace) = classifier.forward(fake, Mode::Train)?;
        let (loss, g) = softmax_loss(&rows(&logits), labels)?;
        l_s = loss;
        let (dx, _) = classifier.backward(&trace, as4(g * w.softmax), false);
        d_fake += &dx;
    }
    Ok((d_fake, l_g, l_s))
}

/// Complete training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub nets: Networks,
    pub opt: Optimizers,
    /// Completed steps.
    pub step: u64,
    /// Current epoch (0-based).
    pub epoch: u64,
    /// Index of the next step within the current epoch.
    pub cursor: u64,
    pub history: Vec<LossRecord>,
    /// Class-label order of the classifier outputs.
    pub speakers: Vec<String>,
}

impl Trainer {
    /// Fresh state for training on `features`.
    pub fn new(config: TrainConfig, features: &FeatureSet) -> Result<Self> {
        config.validate()?;
        let (frames, mels) = features
            .shape()
            .ok_or_else(|| Error::Config("empty feature set".into()))?;
        if (frames, mels) != (config.arch.frames, config.arch.mels) {
            return Err(Error::shape(
                format!("{}x{} slices", config.arch.frames, config.arch.mels),
                format!("{frames}x{mels}"),
            ));
        }
        let nets = init_params(&config.arch, features.num_classes(), config.seed)?;
        let opt = Optimizers::new(&config, &nets);
        Ok(Self {
            config,
            nets,
            opt,
            step: 0,
            epoch: 0,
            cursor: 0,
            history: Vec::new(),
            speakers: features.speakers().to_vec(),
        })
    }

    fn check_features(&self, features: &FeatureSet) -> Result<()> {
        if features.speakers() != self.speakers.as_slice() {
            return Err(Error::CheckpointMismatch(
                "feature set speakers differ from the ones this model was trained on".into(),
            ));
        }
        Ok(())
    }

    /// Encoder gradient of the selected terms on a frozen copy of the
    /// networks, using the noise the trainer would draw at the next step.
    pub fn encoder_gradient(&self, input: &StepInput, terms: EncoderTerms) -> Result<Grads> {
        let mut nets = self.nets.clone();
        let mut noise = StepNoise::new(self.config.seed, self.step + 1);
        let n = input.x.shape()[0];
        let z0 = noise.normal(n, self.config.arch.noise_dim);
        let (grads, _) = encoder_pass(&self.config, &mut nets, input, &z0, terms)?;
        Ok(grads.unwrap_or_else(|| Grads::zeros_like(&self.nets.encoder.net)))
    }

    /// Terms the encoder optimizes under the current flags.
    pub fn encoder_terms(&self) -> EncoderTerms {
        let c = &self.config;
        EncoderTerms {
            triplet: c.use_triplet,
            softmax: c.use_gan && c.use_softmax,
            adversarial: c.use_gan,
        }
    }

    /// One optimization round. On any non-finite loss or gradient the state
    /// is left exactly as before the step and the error is returned.
    pub fn train_step(&mut self, input: &StepInput) -> Result<LossRecord> {
        let backup = (self.nets.clone(), self.opt.clone());
        match self.step_inner(input) {
            Ok(r) => Ok(r),
            Err(e) => {
                (self.nets, self.opt) = backup;
                Err(e)
            }
        }
    }

    fn step_inner(&mut self, input: &StepInput) -> Result<LossRecord> {
        let cfg = self.config.clone();
        let w = cfg.weights;
        let step = self.step + 1;
        let mut noise = StepNoise::new(cfg.seed, step);
        let n = input.x.shape()[0];
        let z0 = noise.normal(n, cfg.arch.noise_dim);
        let eps = noise.uniform(n);
        let mut comp = LossComponents::default();

        // (i) encoder
        let terms = self.encoder_terms();
        let mut embeddings = None;
        let mut fake0 = None;
        if terms.triplet || terms.adversarial {
            let (grads, out) = encoder_pass(&cfg, &mut self.nets, input, &z0, terms)?;
            comp.triplet = finite("L_T", out.triplet)?;
            if let Some(g) = grads {
                finite_grads("encoder gradient", &g)?;
                self.opt.encoder.step(self.nets.encoder.net.params_mut(), &g);
            }
            embeddings = Some(out.embeddings);
            fake0 = out.fake;
        }

        // (ii) classifier
        if cfg.use_softmax {
            let (x, labels) = match &fake0 {
                Some(f) => (stack(&input.x, f), [input.labels.clone(), input.labels.clone()].concat()),
                None => (input.x.clone(), input.labels.clone()),
            };
            let net = &mut self.nets.classifier.net;
            let (logits, trace) = net.forward(&x, Mode::Train)?;
            let (loss, g) = softmax_loss(&rows(&logits), &labels)?;
            comp.softmax = finite("L_S", loss)?;
            let (_, grads) = net.backward(&trace, as4(g * w.softmax), true);
            let grads = grads.expect("requested");
            finite_grads("classifier gradient", &grads)?;
            self.opt.classifier.step(net.params_mut(), &grads);
        }

        if cfg.use_gan {
            let fake = fake0.expect("generated in the encoder pass");
            let emb = embeddings.expect("computed in the encoder pass");

            // (iii) critic
            let critic = &mut self.nets.critic.net;
            let (real_s, real_t) = critic.forward(&input.x, Mode::Train)?;
            let (fake_s, fake_t) = critic.forward(&fake, Mode::Train)?;
            let (real_s, fake_s) = (real_s.into_raw_vec_and_offset().0, fake_s.into_raw_vec_and_offset().0);
            let (gp, gp_grads) = match cfg.adversarial {
                Adversarial::WganGp => {
                    gradient_penalty_at(&self.nets.critic, &input.x, &fake, &eps, cfg.gp_lambda)?
                }
                Adversarial::LogLoss => (0.0, Grads::zeros_like(&self.nets.critic.net)),
            };
            let critic = &mut self.nets.critic.net;
            let gl = adversarial(&cfg, &real_s, &fake_s, gp);
            comp.critic = finite("L_D", gl.critic)?;
            let (_, gr) = critic.backward(&real_t, scores_grad(&gl.d_real), true);
            let (_, gf) = critic.backward(&fake_t, scores_grad(&gl.d_fake), true);
            let mut grads = gr.expect("requested");
            grads.add_scaled(&gf.expect("requested"), 1.0);
            grads.add_scaled(&gp_grads, 1.0);
            grads.scale(w.critic);
            finite_grads("critic gradient", &grads)?;
            self.opt.critic.step(critic.params_mut(), &grads);

            // (iv) generator
            let mut l_g = 0.0;
            for _ in 0..cfg.g_steps_per_d_step {
                let z = noise.normal(n, cfg.arch.noise_dim);
                let cond = self.nets.generator.condition(&emb, &z)?;
                let (f, trace) = self.nets.generator.net.forward(&cond, Mode::Train)?;
                let (d_f, lg, _) = fake_feedback(
                    &cfg,
                    &self.nets.critic.net,
                    &mut self.nets.classifier.net,
                    &f,
                    &input.labels,
                    true,
                    cfg.use_softmax,
                )?;
                l_g += finite("L_G", lg)?;
                let (_, grads) = self.nets.generator.net.backward(&trace, d_f, true);
                let grads = grads.expect("requested");
                finite_grads("generator gradient", &grads)?;
                self.opt.generator.step(self.nets.generator.net.params_mut(), &grads);
            }
            comp.generator = l_g / cfg.g_steps_per_d_step as f64;
        }

        let total = total_loss(&comp, &w)?;
        let record = LossRecord {
            step,
            epoch: self.epoch,
            components: comp,
            total,
        };
        self.step = step;
        self.history.push(record);
        Ok(record)
    }

    /// Merged batch for step `cursor` of `epoch`.
    fn batch_for(&self, sampler: &Sampler<'_>, groups: &[crate::sampler::GroupDraw], cursor: u64) -> Result<TripletBatch> {
        let k = self.config.batch_speakers;
        let start = cursor as usize * k;
        let parts = groups[start..(start + k).min(groups.len())]
            .iter()
            .map(|g| sampler.resolve(g, Some(&self.nets.encoder)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TripletBatch::merge(&parts))
    }

    /// Steps per epoch for `features`.
    pub fn steps_per_epoch(&self, features: &FeatureSet) -> Result<u64> {
        let sampler = Sampler::new(&self.config.plan, self.config.margin, features)?;
        Ok(sampler.speakers_per_epoch().div_ceil(self.config.batch_speakers) as u64)
    }

    /// Train until `config.epochs` epochs are complete or `max_steps` more
    /// steps have run. With `out_dir`, writes `losses.csv`,
    /// `checkpoint.mtgc` and fake dumps under `fakes/`.
    pub fn run_steps(&mut self, features: &FeatureSet, out_dir: Option<&Path>, max_steps: Option<u64>) -> Result<()> {
        self.check_features(features)?;
        let sampler = Sampler::new(&self.config.plan, self.config.margin, features)?;
        let per_epoch = sampler.speakers_per_epoch().div_ceil(self.config.batch_speakers) as u64;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
        let mut last_good: Option<PathBuf> = ckpt_path.clone().filter(|p| p.exists());
        let mut budget = max_steps.unwrap_or(u64::MAX);
        while self.epoch < self.config.epochs as u64 && budget > 0 {
            let groups = sampler.epoch_groups(self.epoch);
            while self.cursor < per_epoch && budget > 0 {
                let batch = self.batch_for(&sampler, &groups, self.cursor)?;
                let input = StepInput::new(features, batch)?;
                if let Err(e) = self.train_step(&input) {
                    let last = last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string());
                    log::error!("step {} failed: {e}", self.step + 1);
                    return Err(Error::TrainAborted {
                        step: self.step + 1,
                        last_checkpoint: last,
                        source: Box::new(e),
                    });
                }
                self.cursor += 1;
                budget -= 1;
                let every = self.config.dump_every as u64;
                if let (Some(dir), true) = (out_dir, every > 0 && self.step % every == 0) {
                    self.dump_fakes(features, &input, &dir.join("fakes"))?;
                }
            }
            if self.cursor == per_epoch {
                self.cursor = 0;
                self.epoch += 1;
                if let Some(last) = self.history.last() {
                    log::info!(
                        "epoch {} done at step {}: L_T={:.4} L_S={:.4} L_G={:.4} L_D={:.4}",
                        self.epoch,
                        last.step,
                        last.components.triplet,
                        last.components.softmax,
                        last.components.generator,
                        last.components.critic
                    );
                }
                let every = self.config.checkpoint_every as u64;
                if let (Some(dir), Some(path)) = (out_dir, &ckpt_path) {
                    if every > 0 && self.epoch % every == 0 {
                        self.write_outputs(dir, path)?;
                        last_good = Some(path.clone());
                    }
                }
            }
        }
        if let (Some(dir), Some(path)) = (out_dir, &ckpt_path) {
            self.write_outputs(dir, path)?;
        }
        Ok(())
    }

    /// Train to completion.
    pub fn run(&mut self, features: &FeatureSet, out_dir: Option<&Path>) -> Result<()> {
        self.run_steps(features, out_dir, None)
    }

    fn write_outputs(&self, dir: &Path, ckpt: &Path) -> Result<()> {
        crate::checkpoint::save(self, ckpt)?;
        write_atomic(&dir.join(LOSS_CSV_FILE), loss_csv(&self.history).as_bytes())
    }

    /// Render inference-mode fakes for the batch's slices (one per
    /// source slice, at most 8) and save them tagged `fake`.
    fn dump_fakes(&self, features: &FeatureSet, input: &StepInput, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let k = input.batch.slices.len().min(8);
        let x = input.x.slice(s![..k, .., .., ..]).to_owned();
        let emb = self.nets.encoder.encode_batch(&x)?;
        let mut noise = StepNoise::new(self.config.seed ^ 0xfa4e, self.step);
        let z = noise.normal(k, self.config.arch.noise_dim);
        let fake = self.nets.generator.net.infer(&self.nets.generator.condition(&emb, &z)?)?;
        let (frames, mels) = (self.config.arch.frames, self.config.arch.mels);
        let slices = (0..k)
            .map(|i| {
                let src = &features.slices[input.batch.slices[i]];
                FbankSlice {
                    matrix: fake.index_axis(Axis(0), i).iter().map(|&v| v as f32).collect(),
                    frames,
                    mels,
                    speaker_id: src.speaker_id.clone(),
                    utterance_id: format!("{}-fake", src.utterance_id),
                    slice_index: src.slice_index,
                }
            })
            .collect();
        let set = FeatureSet::from_slices(slices)?.with_tag(SetTag::Fake);
        save_features(&set, &dir.join(format!("step{:06}.mtgf", self.step)))
    }

    /// Continue from a checkpoint with a compatible config (only
    /// `epochs`, `dump_every` and `checkpoint_every` may differ).
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        let mut t = crate::checkpoint::load(path)?;
        t.config.ensure_compatible(&config)?;
        t.config = config;
        Ok(t)
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.mtgc";
pub const LOSS_CSV_FILE: &str = "losses.csv";

struct EncoderOut {
    triplet: f64,
    embeddings: Array2<f64>,
    fake: Option<Array4<f64>>,
}

/// Encoder forward/backward for the selected terms. Mutates only the
/// running statistics of the networks it evaluates.
fn encoder_pass(
    cfg: &TrainConfig,
    nets: &mut Networks,
    input: &StepInput,
    z0: &Array2<f64>,
    terms: EncoderTerms,
) -> Result<(Option<Grads>, EncoderOut)> {
    let w = &cfg.weights;
    let (e4, trace) = nets.encoder.net.forward(&input.x, Mode::Train)?;
    let emb = rows(&e4);
    let mut d_emb = Array2::zeros(emb.raw_dim());
    let mut any = false;
    let mut triplet = 0.0;
    if terms.triplet {
        let (l, g) = triplet_loss_indexed(&emb, &input.batch.triples, cfg.margin, cfg.triplet_reduction)?;
        triplet = l;
        d_emb.scaled_add(w.triplet, &g);
        any = true;
    }
    let mut fake = None;
    if cfg.use_gan {
        let cond = nets.generator.condition(&emb, z0)?;
        let (f, g_trace) = nets.generator.net.forward(&cond, Mode::Train)?;
        if terms.adversarial || terms.softmax {
            let (d_f, _, _) = fake_feedback(
                cfg,
                &nets.critic.net,
                &mut nets.classifier.net,
                &f,
                &input.labels,
                terms.adversarial,
                terms.softmax,
            )?;
            let (d_cond, _) = nets.generator.net.backward(&g_trace, d_f, false);
            let d = cfg.arch.embed_dim;
            let dc = rows(&d_cond);
            d_emb += &dc.slice(s![.., ..d]);
            any = true;
        }
        fake = Some(f);
    }
    let grads = if any {
        let (_, g) = nets.encoder.net.backward(&trace, as4(d_emb), true);
        g
    } else {
        None
    };
    Ok((
        grads,
        EncoderOut {
            triplet,
            embeddings: emb,
            fake,
        },
    ))
}

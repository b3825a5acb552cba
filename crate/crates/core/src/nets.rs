//! The four trainable networks: embedding encoder, conditional generator,
//! critic and speaker classifier. All convolutions use `kernel × kernel`
//! filters with stride 2 and "same" padding, so every block halves (or, in
//! the generator, doubles) the spatial size.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Architecture;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Linear, Sequential};

/// Unit-norm speaker embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v` to unit length.
    pub fn new(mut v: Vec<f64>) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Embedding(v)
    }

    /// Wrap an already-normalized vector without touching it.
    pub fn from_unit(v: Vec<f64>) -> Self {
        Embedding(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Stack `count` row-major `frames × mels` matrices into an
/// `(count, 1, frames, mels)` batch.
pub fn batch_from_matrices<'a, I>(matrices: I, frames: usize, mels: usize) -> Result<Array4<f64>>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut data = Vec::new();
    let mut count = 0;
    for m in matrices {
        if m.len() != frames * mels {
            return Err(Error::shape(format!("{frames}x{mels} matrix"), format!("{} values", m.len())));
        }
        data.extend(m.iter().map(|&v| v as f64));
        count += 1;
    }
    Ok(Array4::from_shape_vec((count, 1, frames, mels), data).expect("length checked"))
}

fn check_input(x: &Array4<f64>, arch: &Architecture) -> Result<()> {
    let s = x.shape();
    if s[1] != 1 || s[2] != arch.frames || s[3] != arch.mels {
        return Err(Error::shape(
            format!("(batch, 1, {}, {})", arch.frames, arch.mels),
            format!("{s:?}"),
        ));
    }
    Ok(())
}

/// Downsampling conv stack; returns layers and the final `(channels, h, w)`.
fn conv_stack(
    rng: &mut ChaCha8Rng,
    arch: &Architecture,
    channels: &[usize],
    batch_norm: bool,
) -> (Vec<Layer>, (usize, usize, usize)) {
    let mut layers = Vec::new();
    let (mut c, mut h, mut w) = (1, arch.frames, arch.mels);
    for &next in channels {
        let conv = Conv2d::new(rng, c, next, arch.kernel, 2, arch.kernel / 2);
        (h, w) = conv.out_hw(h, w);
        layers.push(Layer::Conv(conv));
        if batch_norm {
            layers.push(Layer::BatchNorm(BatchNorm2d::new(next)));
        }
        layers.push(Layer::LeakyRelu(arch.leaky_slope));
        c = next;
    }
    (layers, (c, h, w))
}

/// Maps a `frames × mels` slice to a unit-norm `embed_dim` vector.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub net: Sequential,
    arch: Architecture,
}

impl EncoderNet {
    pub fn new(arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let (mut layers, (c, h, w)) = conv_stack(rng, arch, &arch.encoder_channels, true);
        layers.push(Layer::Linear(Linear::new(rng, c * h * w, arch.embed_dim)));
        layers.push(Layer::L2Normalize);
        Self {
            net: Sequential::new(layers),
            arch: arch.clone(),
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Inference-mode embeddings, one row per input.
    pub fn encode_batch(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        check_input(x, &self.arch)?;
        let y = self.net.infer(x)?;
        let n = y.shape()[0];
        Ok(y.into_shape_with_order((n, self.arch.embed_dim)).expect("embedding shape"))
    }

    /// Embed one row-major `frames × mels` matrix.
    pub fn encode(&self, matrix: &[f32]) -> Result<Embedding> {
        let x = batch_from_matrices([matrix], self.arch.frames, self.arch.mels)?;
        let e = self.encode_batch(&x)?;
        Ok(Embedding::from_unit(e.row(0).to_vec()))
    }
}

/// Renders a fake slice from an embedding and a noise vector.
#[derive(Clone, Debug)]
pub struct GeneratorNet {
    pub net: Sequential,
    arch: Architecture,
}

impl GeneratorNet {
    pub fn new(arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let g = &arch.generator_channels;
        let up = 1usize << g.len();
        let (sh, sw) = (arch.frames / up, arch.mels / up);
        let mut layers = vec![
            Layer::Linear(Linear::new(rng, arch.embed_dim + arch.noise_dim, g[0] * sh * sw)),
            Layer::Reshape(g[0], sh, sw),
            Layer::BatchNorm(BatchNorm2d::new(g[0])),
            Layer::LeakyRelu(0.0),
        ];
        let pad = arch.kernel / 2;
        for pair in g.windows(2) {
            layers.push(Layer::ConvTranspose(ConvTranspose2d::new(
                rng, pair[0], pair[1], arch.kernel, 2, pad, 1,
            )));
            layers.push(Layer::BatchNorm(BatchNorm2d::new(pair[1])));
            layers.push(Layer::LeakyRelu(0.0));
        }
        let last = *g.last().expect("non-empty");
        layers.push(Layer::ConvTranspose(ConvTranspose2d::new(
            rng, last, 1, arch.kernel, 2, pad, 1,
        )));
        Self {
            net: Sequential::new(layers),
            arch: arch.clone(),
        }
    }

    /// Concatenate embeddings `(n, embed_dim)` and noise `(n, noise_dim)`
    /// into the generator input.
    pub fn condition(&self, embeddings: &Array2<f64>, noise: &Array2<f64>) -> Result<Array4<f64>> {
        let n = embeddings.nrows();
        if embeddings.ncols() != self.arch.embed_dim {
            return Err(Error::shape(
                format!("{}-d embedding", self.arch.embed_dim),
                format!("{}-d", embeddings.ncols()),
            ));
        }
        if noise.ncols() != self.arch.noise_dim || noise.nrows() != n {
            return Err(Error::shape(
                format!("({n}, {}) noise", self.arch.noise_dim),
                format!("{:?}", noise.shape()),
            ));
        }
        let width = self.arch.embed_dim + self.arch.noise_dim;
        let mut x = Array4::zeros((n, width, 1, 1));
        for b in 0..n {
            for (j, v) in embeddings.row(b).iter().chain(noise.row(b).iter()).enumerate() {
                x[[b, j, 0, 0]] = *v;
            }
        }
        Ok(x)
    }

    /// Inference-mode generation of one fake matrix (row-major `frames × mels`).
    pub fn generate(&self, embedding: &Embedding, noise: &[f64]) -> Result<Vec<f64>> {
        let e = Array2::from_shape_vec((1, embedding.dim()), embedding.as_slice().to_vec())
            .expect("row");
        let z = Array2::from_shape_vec((1, noise.len()), noise.to_vec()).expect("row");
        let x = self.condition(&e, &z)?;
        Ok(self.net.infer(&x)?.into_raw_vec_and_offset().0)
    }
}

/// Wasserstein critic: one unbounded score per input, no normalization layers.
#[derive(Clone, Debug)]
pub struct DiscriminatorNet {
    pub net: Sequential,
    arch: Architecture,
}

impl DiscriminatorNet {
    pub fn new(arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let (mut layers, (c, h, w)) = conv_stack(rng, arch, &arch.critic_channels, false);
        layers.push(Layer::Linear(Linear::new(rng, c * h * w, 1)));
        Self {
            net: Sequential::new(layers),
            arch: arch.clone(),
        }
    }

    /// Wrap an arbitrary scalar-output stack (used for analytic checks).
    pub fn from_layers(arch: &Architecture, layers: Vec<Layer>) -> Self {
        Self {
            net: Sequential::new(layers),
            arch: arch.clone(),
        }
    }

    pub fn discriminate_batch(&self, x: &Array4<f64>) -> Result<Vec<f64>> {
        check_input(x, &self.arch)?;
        Ok(self.net.infer(x)?.into_raw_vec_and_offset().0)
    }

    pub fn discriminate(&self, matrix: &[f32]) -> Result<f64> {
        let x = batch_from_matrices([matrix], self.arch.frames, self.arch.mels)?;
        Ok(self.discriminate_batch(&x)?[0])
    }
}

/// Speaker-ID classifier over real or generated slices.
#[derive(Clone, Debug)]
pub struct ClassifierNet {
    pub net: Sequential,
    arch: Architecture,
    classes: usize,
}

impl ClassifierNet {
    pub fn new(arch: &Architecture, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let (mut layers, (c, h, w)) = conv_stack(rng, arch, &arch.classifier_channels, true);
        layers.push(Layer::Linear(Linear::new(rng, c * h * w, classes)));
        Self {
            net: Sequential::new(layers),
            arch: arch.clone(),
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Inference-mode logits, one row per input.
    pub fn classify_batch(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        check_input(x, &self.arch)?;
        let y = self.net.infer(x)?;
        let n = y.shape()[0];
        Ok(y.into_shape_with_order((n, self.classes)).expect("logit shape"))
    }

    pub fn classify(&self, matrix: &[f32]) -> Result<Vec<f64>> {
        let x = batch_from_matrices([matrix], self.arch.frames, self.arch.mels)?;
        Ok(self.classify_batch(&x)?.row(0).to_vec())
    }
}

/// All four networks of one model.
#[derive(Clone, Debug)]
pub struct Networks {
    pub encoder: EncoderNet,
    pub generator: GeneratorNet,
    pub critic: DiscriminatorNet,
    pub classifier: ClassifierNet,
}

/// Deterministic initialization; each network draws from its own stream so
/// changing one architecture does not perturb the others.
pub fn init_params(arch: &Architecture, classes: usize, seed: u64) -> Result<Networks> {
    arch.validate()?;
    if classes == 0 {
        return Err(Error::Config("classifier needs at least one class".into()));
    }
    let stream = |id: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        rng
    };
    Ok(Networks {
        encoder: EncoderNet::new(arch, &mut stream(1)),
        generator: GeneratorNet::new(arch, &mut stream(2)),
        critic: DiscriminatorNet::new(arch, &mut stream(3)),
        classifier: ClassifierNet::new(arch, classes, &mut stream(4)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small_arch() -> Architecture {
        Architecture {
            frames: 16,
            mels: 16,
            embed_dim: 8,
            noise_dim: 4,
            encoder_channels: vec![2, 3],
            generator_channels: vec![3, 2],
            critic_channels: vec![2, 3],
            classifier_channels: vec![2],
            ..Architecture::default()
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize, arch: &Architecture) -> Array4<f64> {
        Array4::from_shape_fn((n, 1, arch.frames, arch.mels), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn encoder_output_is_unit_norm_and_deterministic() {
        let arch = small_arch();
        let nets = init_params(&arch, 3, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_input(&mut rng, 4, &arch);
        let e1 = nets.encoder.encode_batch(&x).unwrap();
        let e2 = nets.encoder.encode_batch(&x).unwrap();
        assert_eq!(e1, e2);
        for row in e1.rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let arch = small_arch();
        let nets = init_params(&arch, 3, 11).unwrap();
        let err = nets.encoder.encode(&vec![0.0f32; 10]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        let e = Embedding::new(vec![1.0; 5]);
        assert!(nets.generator.generate(&e, &[0.0; 4]).is_err());
    }

    #[test]
    fn generator_produces_input_shaped_output() {
        let arch = small_arch();
        let nets = init_params(&arch, 3, 5).unwrap();
        let e = Embedding::new((0..8).map(|i| i as f64).collect());
        let out = nets.generator.generate(&e, &[0.5, -0.1, 0.2, 1.0]).unwrap();
        assert_eq!(out.len(), 16 * 16);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_input_stays_finite_everywhere() {
        let arch = small_arch();
        let mut nets = init_params(&arch, 3, 5).unwrap();
        let x = Array4::from_elem((3, 1, 16, 16), 0.7);
        let (y, _) = nets.encoder.net.forward(&x, crate::nn::Mode::Train).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        let (y, _) = nets.classifier.net.forward(&x, crate::nn::Mode::Train).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!(nets.critic.discriminate_batch(&x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let arch = small_arch();
        let a = init_params(&arch, 3, 9).unwrap();
        let b = init_params(&arch, 3, 9).unwrap();
        let c = init_params(&arch, 3, 10).unwrap();
        assert_eq!(a.encoder.net.params(), b.encoder.net.params());
        assert_ne!(a.encoder.net.params(), c.encoder.net.params());
    }
}

use ndarray::Array4;

use super::layers::{
    l2_normalize, l2_normalize_backward, leaky_relu, leaky_relu_mask, BatchNorm2d, Conv2d,
    ConvTranspose2d, Linear, Mode,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    BatchNorm(BatchNorm2d),
    LeakyRelu(f64),
    Linear(Linear),
    /// Reinterpret each sample as `(channels, height, width)`.
    Reshape(usize, usize, usize),
    L2Normalize,
}

#[derive(Debug)]
enum Cache {
    Input(Array4<f64>),
    Norm(Array4<f64>, Vec<f64>),
    Bn(Array4<f64>, Vec<f64>),
    /// Inference-mode batch norm acts as a fixed per-channel scale.
    BnEval,
    Shape([usize; 4]),
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug)]
pub struct Trace {
    caches: Vec<Cache>,
    input_shape: [usize; 4],
}

/// Gradients aligned with [`Sequential::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(net: &Sequential) -> Self {
        Grads(net.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn dot(&self, other: &Grads) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

fn shape4(x: &Array4<f64>) -> [usize; 4] {
    let s = x.shape();
    [s[0], s[1], s[2], s[3]]
}

/// A feed-forward stack of layers.
#[derive(Clone, Debug)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Trainable tensors, two per parameterized layer (weight/gamma, bias/beta).
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(c.weight.as_slice().expect("contiguous"));
                    out.push(c.bias.as_slice().expect("contiguous"));
                }
                Layer::ConvTranspose(c) => {
                    out.push(c.weight.as_slice().expect("contiguous"));
                    out.push(c.bias.as_slice().expect("contiguous"));
                }
                Layer::BatchNorm(b) => {
                    out.push(b.gamma.as_slice().expect("contiguous"));
                    out.push(b.beta.as_slice().expect("contiguous"));
                }
                Layer::Linear(l) => {
                    out.push(l.weight.as_slice().expect("contiguous"));
                    out.push(l.bias.as_slice().expect("contiguous"));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(c.weight.as_slice_mut().expect("contiguous"));
                    out.push(c.bias.as_slice_mut().expect("contiguous"));
                }
                Layer::ConvTranspose(c) => {
                    out.push(c.weight.as_slice_mut().expect("contiguous"));
                    out.push(c.bias.as_slice_mut().expect("contiguous"));
                }
                Layer::BatchNorm(b) => {
                    out.push(b.gamma.as_slice_mut().expect("contiguous"));
                    out.push(b.beta.as_slice_mut().expect("contiguous"));
                }
                Layer::Linear(l) => {
                    out.push(l.weight.as_slice_mut().expect("contiguous"));
                    out.push(l.bias.as_slice_mut().expect("contiguous"));
                }
                _ => {}
            }
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(b) => Some([
                    b.running_mean.as_slice().expect("contiguous"),
                    b.running_var.as_slice().expect("contiguous"),
                ]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(b) = layer {
                out.push(b.running_mean.as_slice_mut().expect("contiguous"));
                out.push(b.running_var.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Forward pass recording what backward needs. In `Mode::Train`
    /// batch-norm layers use batch statistics and update running statistics.
    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<(Array4<f64>, Trace)> {
        let input_shape = shape4(x);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Conv(c) => {
                    check_channels(c.weight.shape()[1], &h)?;
                    (c.forward(&h), Cache::Input(h))
                }
                Layer::ConvTranspose(c) => {
                    check_channels(c.weight.shape()[0], &h)?;
                    (c.forward(&h), Cache::Input(h))
                }
                Layer::BatchNorm(b) => {
                    check_channels(b.gamma.len(), &h)?;
                    match b.forward(&h, mode) {
                        (y, Some((xhat, inv))) => (y, Cache::Bn(xhat, inv)),
                        (y, None) => (y, Cache::BnEval),
                    }
                }
                Layer::LeakyRelu(s) => (leaky_relu(&h, *s), Cache::Input(h)),
                Layer::Linear(l) => {
                    check_features(l.inputs(), &h)?;
                    (l.forward(&h), Cache::Input(h))
                }
                Layer::Reshape(c, hh, ww) => {
                    let from = shape4(&h);
                    let y = reshape(h, [from[0], *c, *hh, *ww])?;
                    (y, Cache::Shape(from))
                }
                Layer::L2Normalize => {
                    let (y, norms) = l2_normalize(&h);
                    (y.clone(), Cache::Norm(y, norms))
                }
            };
            caches.push(cache);
            h = next;
        }
        Ok((h, Trace { caches, input_shape }))
    }

    /// Inference-mode forward pass; never mutates the network.
    pub fn infer(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => {
                    check_channels(c.weight.shape()[1], &h)?;
                    c.forward(&h)
                }
                Layer::ConvTranspose(c) => {
                    check_channels(c.weight.shape()[0], &h)?;
                    c.forward(&h)
                }
                Layer::BatchNorm(b) => {
                    check_channels(b.gamma.len(), &h)?;
                    b.eval(&h)
                }
                Layer::LeakyRelu(s) => leaky_relu(&h, *s),
                Layer::Linear(l) => {
                    check_features(l.inputs(), &h)?;
                    l.forward(&h)
                }
                Layer::Reshape(c, hh, ww) => {
                    let n = h.shape()[0];
                    reshape(h, [n, *c, *hh, *ww])?
                }
                Layer::L2Normalize => l2_normalize(&h).0,
            };
        }
        Ok(h)
    }

    /// Backpropagate `dy` through the recorded trace. Parameter gradients are
    /// only computed when `want_params` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        dy: Array4<f64>,
        want_params: bool,
    ) -> (Array4<f64>, Option<Grads>) {
        let (dx, grads, _) = self.backward_impl(trace, dy, want_params, false);
        (dx, grads)
    }

    /// Returns `(dx, grads, dout_per_layer)`; `dout[i]` is the gradient at
    /// the output of layer `i`.
    fn backward_impl(
        &self,
        trace: &Trace,
        dy: Array4<f64>,
        want_params: bool,
        keep_douts: bool,
    ) -> (Array4<f64>, Option<Grads>, Vec<Array4<f64>>) {
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut douts = Vec::new();
        let mut g = dy;
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            if keep_douts {
                douts.push(g.clone());
            }
            g = match (layer, cache) {
                (Layer::Conv(c), Cache::Input(x)) => {
                    if want_params {
                        grads.push(Conv2d::bias_grad(&g));
                        grads.push(c.weight_grad(x, &g));
                    }
                    c.input_grad(x.shape(), &g)
                }
                (Layer::ConvTranspose(c), Cache::Input(x)) => {
                    let (dx, p) = c.backward(x, &g, want_params);
                    if let Some((dw, db)) = p {
                        grads.push(db);
                        grads.push(dw);
                    }
                    dx
                }
                (Layer::BatchNorm(b), Cache::Bn(xhat, inv)) => {
                    let (dx, dgamma, dbeta) = b.backward(xhat, inv, &g);
                    if want_params {
                        grads.push(dbeta);
                        grads.push(dgamma);
                    }
                    dx
                }
                (Layer::BatchNorm(b), Cache::BnEval) => {
                    if want_params {
                        // Gradients w.r.t. gamma/beta are not needed in eval mode.
                        grads.push(vec![0.0; b.beta.len()]);
                        grads.push(vec![0.0; b.gamma.len()]);
                    }
                    let mut dx = g;
                    for ch in 0..dx.shape()[1] {
                        let s = b.gamma[ch] / (b.running_var[ch] + b.eps).sqrt();
                        dx.index_axis_mut(ndarray::Axis(1), ch).mapv_inplace(|v| v * s);
                    }
                    dx
                }
                (Layer::LeakyRelu(s), Cache::Input(x)) => leaky_relu_mask(x, &g, *s),
                (Layer::Linear(l), Cache::Input(x)) => {
                    if want_params {
                        grads.push(Linear::bias_grad(&g));
                        grads.push(l.weight_grad(x, &g));
                    }
                    l.input_grad(x.shape(), &g)
                }
                (Layer::Reshape(..), Cache::Shape(from)) => reshape(g, *from).expect("same size"),
                (Layer::L2Normalize, Cache::Norm(y, norms)) => l2_normalize_backward(y, norms, &g),
                _ => unreachable!("trace does not match network"),
            };
        }
        debug_assert_eq!(shape4(&g), trace.input_shape);
        grads.reverse();
        douts.reverse();
        (g, want_params.then_some(Grads(grads)), douts)
    }

    /// Gradient penalty `mean_b (‖∇ₓ f(x_b)‖₂ − 1)²` for a scalar-output
    /// network, together with `scale ×` its parameter gradient and the input
    /// gradients `∇ₓ f`.
    ///
    /// The parameter gradient is the gradient of the directional derivative
    /// `⟨∇ₓ f, v⟩` (with `v = ∂penalty/∂(∇ₓ f)` held fixed), obtained by pushing
    /// `v` forward through the linear part of every layer with activation
    /// slopes frozen. This is exact wherever the activations are piecewise
    /// linear, so only conv, linear, leaky-ReLU and reshape layers are allowed.
    pub fn gradient_penalty(&self, x: &Array4<f64>, scale: f64) -> Result<(f64, Grads, Array4<f64>)> {
        let n = x.shape()[0];
        // Forward with caches; no batch norm is allowed so the mode is irrelevant.
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Conv(c) => (c.forward(&h), Cache::Input(h)),
                Layer::Linear(l) => (l.forward(&h), Cache::Input(h)),
                Layer::LeakyRelu(s) => (leaky_relu(&h, *s), Cache::Input(h)),
                Layer::Reshape(c, hh, ww) => {
                    let from = shape4(&h);
                    (reshape(h, [from[0], *c, *hh, *ww])?, Cache::Shape(from))
                }
                _ => {
                    return Err(Error::Config(
                        "gradient penalty needs a piecewise-linear critic (conv/linear/leaky-relu only)"
                            .into(),
                    ))
                }
            };
            caches.push(cache);
            h = next;
        }
        if h.len() != n {
            return Err(Error::shape("scalar output per sample", format!("{:?}", h.shape())));
        }
        let trace = Trace {
            caches,
            input_shape: shape4(x),
        };
        let ones = Array4::from_elem(h.raw_dim(), 1.0);
        let (gx, _, douts) = self.backward_impl(&trace, ones, false, true);

        let per = gx.len() / n;
        let gs = gx.as_slice().expect("contiguous");
        let mut penalty = 0.0;
        let mut v = Array4::zeros(gx.raw_dim());
        {
            let vs = v.as_slice_mut().expect("contiguous");
            for b in 0..n {
                let row = &gs[b * per..(b + 1) * per];
                let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
                penalty += (norm - 1.0).powi(2);
                if norm > 0.0 {
                    let coef = scale * 2.0 * (norm - 1.0) / norm / n as f64;
                    for (o, g) in vs[b * per..(b + 1) * per].iter_mut().zip(row) {
                        *o = coef * g;
                    }
                }
            }
        }
        penalty /= n as f64;

        // Tangent pass: affine layers without bias, activations as fixed masks.
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut t = v;
        for ((layer, cache), dout) in self.layers.iter().zip(&trace.caches).zip(&douts) {
            t = match (layer, cache) {
                (Layer::Conv(c), Cache::Input(_)) => {
                    grads.push(c.weight_grad(&t, dout));
                    grads.push(vec![0.0; c.bias.len()]);
                    c.apply_linear(&t)
                }
                (Layer::Linear(l), Cache::Input(_)) => {
                    grads.push(l.weight_grad(&t, dout));
                    grads.push(vec![0.0; l.bias.len()]);
                    l.apply_linear(&t)
                }
                (Layer::LeakyRelu(s), Cache::Input(x)) => leaky_relu_mask(x, &t, *s),
                (Layer::Reshape(c, hh, ww), Cache::Shape(from)) => {
                    reshape(t, [from[0], *c, *hh, *ww])?
                }
                _ => unreachable!("checked above"),
            };
        }
        Ok((penalty, Grads(grads), gx))
    }
}

fn check_channels(expected: usize, x: &Array4<f64>) -> Result<()> {
    if x.shape()[1] != expected {
        return Err(Error::shape(
            format!("{expected} input channels"),
            format!("{:?}", x.shape()),
        ));
    }
    Ok(())
}

fn check_features(expected: usize, x: &Array4<f64>) -> Result<()> {
    let f = x.shape()[1] * x.shape()[2] * x.shape()[3];
    if f != expected {
        return Err(Error::shape(
            format!("{expected} input features"),
            format!("{:?}", x.shape()),
        ));
    }
    Ok(())
}

fn reshape(x: Array4<f64>, to: [usize; 4]) -> Result<Array4<f64>> {
    let from = format!("{:?}", x.shape());
    let x = x.as_standard_layout().into_owned();
    x.into_shape_with_order(to)
        .map_err(|_| Error::shape(format!("{to:?}"), from))
}

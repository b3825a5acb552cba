//! Layer primitives with hand-written forward and backward passes.
//!
//! Activations are always `Array4<f64>` in `(batch, channels, height,
//! width)` order; fully-connected layers see `(batch, features, 1, 1)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::im2col::ConvGeom;

/// Forward-pass behaviour of stateful layers (batch normalization).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

pub(crate) fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer length matches shape")
}

pub(crate) fn view2_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("buffer length matches shape")
}

fn he_normal<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, len: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

fn per_sample(shape: &[usize]) -> usize {
    shape[1] * shape[2] * shape[3]
}

/// 5×5-style strided convolution, weight `(out, in, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = he_normal(rng, c_in * k * k, c_out * c_in * k * k);
        Self {
            weight: Array4::from_shape_vec((c_out, c_in, k, k), w).expect("shape"),
            bias: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }

    fn geom(&self, x: &Array4<f64>) -> ConvGeom {
        let (_, c_in, k) = self.dims();
        ConvGeom::new(c_in, x.shape()[2], x.shape()[3], k, self.stride, self.pad)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, c_in, k) = self.dims();
        let g = ConvGeom::new(c_in, h, w, k, self.stride, self.pad);
        (g.out_h, g.out_w)
    }

    /// Convolution without bias (the linear part of the layer).
    pub(crate) fn apply_linear(&self, x: &Array4<f64>) -> Array4<f64> {
        let (c_out, _, _) = self.dims();
        let g = self.geom(x);
        let n = x.shape()[0];
        let mut y = Array4::zeros((n, c_out, g.out_h, g.out_w));
        let mut cols = vec![0.0; g.patch_len() * g.out_len()];
        let w = view2(self.weight.as_slice().expect("contiguous"), c_out, g.patch_len());
        let xs = x.as_slice().expect("contiguous");
        let ys = y.as_slice_mut().expect("contiguous");
        let (xin, yout) = (g.in_len(), c_out * g.out_len());
        for b in 0..n {
            g.im2col(&xs[b * xin..(b + 1) * xin], &mut cols);
            let cv = view2(&cols, g.patch_len(), g.out_len());
            let mut yv = view2_mut(&mut ys[b * yout..(b + 1) * yout], c_out, g.out_len());
            general_mat_mul(1.0, &w, &cv, 0.0, &mut yv);
        }
        y
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut y = self.apply_linear(x);
        for (mut ch, &b) in y.axis_iter_mut(Axis(1)).zip(self.bias.iter()) {
            ch += b;
        }
        y
    }

    /// Weight gradient for input `x` and output gradient `dy`.
    pub(crate) fn weight_grad(&self, x: &Array4<f64>, dy: &Array4<f64>) -> Vec<f64> {
        let (c_out, _, _) = self.dims();
        let g = self.geom(x);
        let n = x.shape()[0];
        let mut dw = vec![0.0; self.weight.len()];
        let mut cols = vec![0.0; g.patch_len() * g.out_len()];
        let xs = x.as_slice().expect("contiguous");
        let dys = dy.as_slice().expect("contiguous");
        let (xin, yout) = (g.in_len(), c_out * g.out_len());
        {
            let mut dwv = view2_mut(&mut dw, c_out, g.patch_len());
            for b in 0..n {
                g.im2col(&xs[b * xin..(b + 1) * xin], &mut cols);
                let cv = view2(&cols, g.patch_len(), g.out_len());
                let dyv = view2(&dys[b * yout..(b + 1) * yout], c_out, g.out_len());
                general_mat_mul(1.0, &dyv, &cv.t(), 1.0, &mut dwv);
            }
        }
        dw
    }

    pub(crate) fn input_grad(&self, x_shape: &[usize], dy: &Array4<f64>) -> Array4<f64> {
        let (c_out, c_in, k) = self.dims();
        let g = ConvGeom::new(c_in, x_shape[2], x_shape[3], k, self.stride, self.pad);
        let n = x_shape[0];
        let mut dx = Array4::zeros((n, c_in, x_shape[2], x_shape[3]));
        let mut dcols = vec![0.0; g.patch_len() * g.out_len()];
        let w = view2(self.weight.as_slice().expect("contiguous"), c_out, g.patch_len());
        let dys = dy.as_slice().expect("contiguous");
        let dxs = dx.as_slice_mut().expect("contiguous");
        let (xin, yout) = (g.in_len(), c_out * g.out_len());
        for b in 0..n {
            let dyv = view2(&dys[b * yout..(b + 1) * yout], c_out, g.out_len());
            let mut dcv = view2_mut(&mut dcols, g.patch_len(), g.out_len());
            general_mat_mul(1.0, &w.t(), &dyv, 0.0, &mut dcv);
            g.col2im(&dcols, &mut dxs[b * xin..(b + 1) * xin]);
        }
        dx
    }

    pub(crate) fn bias_grad(dy: &Array4<f64>) -> Vec<f64> {
        dy.axis_iter(Axis(1)).map(|ch| ch.sum()).collect()
    }
}

/// Transposed convolution (fractionally strided), weight `(in, out, k, k)`.
///
/// Output spatial size is `(h - 1) * stride - 2 * pad + k + output_pad`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Self {
        // Each output pixel receives roughly c_in * k * k / stride^2 terms.
        let fan_in = (c_in * k * k / (stride * stride)).max(1);
        let w = he_normal(rng, fan_in, c_in * c_out * k * k);
        Self {
            weight: Array4::from_shape_vec((c_in, c_out, k, k), w).expect("shape"),
            bias: Array1::zeros(c_out),
            stride,
            pad,
            output_pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.shape()[2];
        let f = |v: usize| (v - 1) * self.stride + k + self.output_pad - 2 * self.pad;
        (f(h), f(w))
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        let s = self.weight.shape();
        let (oh, ow) = self.out_hw(h, w);
        let g = ConvGeom::new(s[1], oh, ow, s[2], self.stride, self.pad);
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        g
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let s = self.weight.shape();
        let (c_in, c_out) = (s[0], s[1]);
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let g = self.geom(h, w);
        let mut y = Array4::zeros((n, c_out, g.in_h, g.in_w));
        let mut cols = vec![0.0; g.patch_len() * g.out_len()];
        let wv = view2(self.weight.as_slice().expect("contiguous"), c_in, g.patch_len());
        let xs = x.as_slice().expect("contiguous");
        let ys = y.as_slice_mut().expect("contiguous");
        let (xin, yout) = (c_in * h * w, g.in_len());
        for b in 0..n {
            let xv = view2(&xs[b * xin..(b + 1) * xin], c_in, h * w);
            let mut cv = view2_mut(&mut cols, g.patch_len(), g.out_len());
            general_mat_mul(1.0, &wv.t(), &xv, 0.0, &mut cv);
            g.col2im(&cols, &mut ys[b * yout..(b + 1) * yout]);
        }
        for (mut ch, &b) in y.axis_iter_mut(Axis(1)).zip(self.bias.iter()) {
            ch += b;
        }
        y
    }

    /// Returns `(dx, dW, db)`; `dW`/`db` are skipped when `want_params` is false.
    pub(crate) fn backward(
        &self,
        x: &Array4<f64>,
        dy: &Array4<f64>,
        want_params: bool,
    ) -> (Array4<f64>, Option<(Vec<f64>, Vec<f64>)>) {
        let s = self.weight.shape();
        let c_in = s[0];
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let g = self.geom(h, w);
        let mut dx = Array4::zeros((n, c_in, h, w));
        let mut dw = vec![0.0; if want_params { self.weight.len() } else { 0 }];
        let mut dcols = vec![0.0; g.patch_len() * g.out_len()];
        let wv = view2(self.weight.as_slice().expect("contiguous"), c_in, g.patch_len());
        let xs = x.as_slice().expect("contiguous");
        let dys = dy.as_slice().expect("contiguous");
        let dxs = dx.as_slice_mut().expect("contiguous");
        let (xin, yout) = (c_in * h * w, g.in_len());
        for b in 0..n {
            g.im2col(&dys[b * yout..(b + 1) * yout], &mut dcols);
            let dcv = view2(&dcols, g.patch_len(), g.out_len());
            let mut dxv = view2_mut(&mut dxs[b * xin..(b + 1) * xin], c_in, h * w);
            general_mat_mul(1.0, &wv, &dcv, 0.0, &mut dxv);
            if want_params {
                let xv = view2(&xs[b * xin..(b + 1) * xin], c_in, h * w);
                let mut dwv = view2_mut(&mut dw, c_in, g.patch_len());
                general_mat_mul(1.0, &xv, &dcv.t(), 1.0, &mut dwv);
            }
        }
        let grads = want_params.then(|| (dw, Conv2d::bias_grad(dy)));
        (dx, grads)
    }
}

/// Per-channel batch normalization over `(batch, height, width)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Returns output plus `(xhat, inv_std)` for the backward pass in train mode.
    pub(crate) fn forward(
        &mut self,
        x: &Array4<f64>,
        mode: Mode,
    ) -> (Array4<f64>, Option<(Array4<f64>, Vec<f64>)>) {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_stds = Vec::with_capacity(c);
        for ch in 0..c {
            let (mean, inv_std) = match mode {
                Mode::Train => {
                    let view = x.index_axis(Axis(1), ch);
                    let mean = view.sum() / count;
                    let var = view.fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / count;
                    let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                    self.running_mean[ch] =
                        (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                    self.running_var[ch] =
                        (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
                    (mean, 1.0 / (var + self.eps).sqrt())
                }
                Mode::Eval => (
                    self.running_mean[ch],
                    1.0 / (self.running_var[ch] + self.eps).sqrt(),
                ),
            };
            xhat.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mean) * inv_std);
            inv_stds.push(inv_std);
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| g * v + b);
        }
        let cache = (mode == Mode::Train).then_some((xhat, inv_stds));
        (y, cache)
    }

    pub(crate) fn eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut y = x.clone();
        for ch in 0..x.shape()[1] {
            let inv_std = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let (m, g, b) = (self.running_mean[ch], self.gamma[ch], self.beta[ch]);
            y.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| g * (v - m) * inv_std + b);
        }
        y
    }

    pub(crate) fn backward(
        &self,
        xhat: &Array4<f64>,
        inv_std: &[f64],
        dy: &Array4<f64>,
    ) -> (Array4<f64>, Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = dy.dim();
        let count = (n * h * w) as f64;
        let mut dx = Array4::zeros(dy.raw_dim());
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let sum_dy = dyc.sum();
            let sum_dy_xh: f64 = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            dgamma[ch] = sum_dy_xh;
            dbeta[ch] = sum_dy;
            let scale = self.gamma[ch] * inv_std[ch] / count;
            let mut dxc = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xh)
                .for_each(|d, &g, &x| {
                    *d = scale * (count * g - sum_dy - x * sum_dy_xh);
                });
        }
        (dx, dgamma, dbeta)
    }
}

/// Fully-connected layer, weight `(out, in)`. Flattens its input per sample.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let w = he_normal(rng, inputs, inputs * outputs);
        Self {
            weight: Array2::from_shape_vec((outputs, inputs), w).expect("shape"),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub(crate) fn apply_linear(&self, x: &Array4<f64>) -> Array4<f64> {
        let n = x.shape()[0];
        let xv = view2(x.as_slice().expect("contiguous"), n, self.inputs());
        let mut y = Array4::zeros((n, self.outputs(), 1, 1));
        {
            let mut yv = view2_mut(y.as_slice_mut().expect("contiguous"), n, self.outputs());
            general_mat_mul(1.0, &xv, &self.weight.t(), 0.0, &mut yv);
        }
        y
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut y = self.apply_linear(x);
        for mut row in y.outer_iter_mut() {
            for (v, b) in row.iter_mut().zip(self.bias.iter()) {
                *v += b;
            }
        }
        y
    }

    pub(crate) fn weight_grad(&self, x: &Array4<f64>, dy: &Array4<f64>) -> Vec<f64> {
        let n = x.shape()[0];
        let xv = view2(x.as_slice().expect("contiguous"), n, self.inputs());
        let dyv = view2(dy.as_slice().expect("contiguous"), n, self.outputs());
        let mut dw = vec![0.0; self.weight.len()];
        {
            let mut dwv = view2_mut(&mut dw, self.outputs(), self.inputs());
            general_mat_mul(1.0, &dyv.t(), &xv, 0.0, &mut dwv);
        }
        dw
    }

    pub(crate) fn input_grad(&self, x_shape: &[usize], dy: &Array4<f64>) -> Array4<f64> {
        let n = x_shape[0];
        let dyv = view2(dy.as_slice().expect("contiguous"), n, self.outputs());
        let mut dx = Array4::zeros((x_shape[0], x_shape[1], x_shape[2], x_shape[3]));
        {
            let mut dxv = view2_mut(dx.as_slice_mut().expect("contiguous"), n, self.inputs());
            general_mat_mul(1.0, &dyv, &self.weight, 0.0, &mut dxv);
        }
        dx
    }

    pub(crate) fn bias_grad(dy: &Array4<f64>) -> Vec<f64> {
        let n = dy.shape()[0];
        let outs = per_sample(dy.shape());
        let dyv = view2(dy.as_slice().expect("contiguous"), n, outs);
        dyv.sum_axis(Axis(0)).to_vec()
    }
}

/// Per-sample L2 normalization over all features.
pub(crate) fn l2_normalize(x: &Array4<f64>) -> (Array4<f64>, Vec<f64>) {
    let n = x.shape()[0];
    let f = per_sample(x.shape());
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(n);
    for row in y.as_slice_mut().expect("contiguous").chunks_mut(f) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    (y, norms)
}

pub(crate) fn l2_normalize_backward(y: &Array4<f64>, norms: &[f64], dy: &Array4<f64>) -> Array4<f64> {
    let f = per_sample(y.shape());
    let mut dx = dy.clone();
    let ys = y.as_slice().expect("contiguous");
    for (b, row) in dx.as_slice_mut().expect("contiguous").chunks_mut(f).enumerate() {
        let yr = &ys[b * f..(b + 1) * f];
        let proj: f64 = yr.iter().zip(row.iter()).map(|(a, g)| a * g).sum();
        for (d, &yv) in row.iter_mut().zip(yr) {
            *d = (*d - yv * proj) / norms[b];
        }
    }
    dx
}

pub(crate) fn leaky_relu(x: &Array4<f64>, slope: f64) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// Multiply `t` by the local slope of the activation evaluated at `x`.
pub(crate) fn leaky_relu_mask(x: &Array4<f64>, t: &Array4<f64>, slope: f64) -> Array4<f64> {
    let mut out = t.clone();
    ndarray::Zip::from(&mut out).and(x).for_each(|o, &xv| {
        if xv <= 0.0 {
            *o *= slope;
        }
    });
    out
}

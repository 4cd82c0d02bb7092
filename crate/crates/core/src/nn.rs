//! Minimal layer library with hand-written backward passes.
//!
//! Convolutional activations use a channel-major `(C, B, H, W)` layout where
//! `B` enumerates every frame of every clip in the batch (`b = clip * T + t`).
//! With that layout a convolution is a single GEMM over im2col columns and
//! batch normalization reduces over one contiguous slab per channel.
//!
//! Layers cache what their backward pass needs only when the forward pass is
//! run with [`Ctx::record`] set.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};

/// Forward-pass flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ctx {
    /// Batch statistics (and running-stat updates) in normalization layers.
    pub training: bool,
    /// Keep activations for a later backward pass.
    pub record: bool,
}

impl Ctx {
    pub const TRAIN: Ctx = Ctx {
        training: true,
        record: true,
    };
    pub const EVAL: Ctx = Ctx {
        training: false,
        record: false,
    };
    /// Running statistics, but keep activations for gradients.
    pub const EVAL_GRAD: Ctx = Ctx {
        training: false,
        record: true,
    };
}

/// A named tensor: trainable weight or a running-statistics buffer.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: ArrayD<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::new(ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng)))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Visitor access to every named tensor of a module tree.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad.fill(0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// 2D convolution applied independently to every frame.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<ConvCache>,
}

#[derive(Clone, Debug)]
struct ConvCache {
    input: Array4<f64>,
}

/// Target size (in values) of one im2col chunk; frames are processed in
/// groups small enough to stay cache-resident.
const COLS_CHUNK: usize = 1 << 18;

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::gaussian(&[out_ch, in_ch, kernel, kernel], init_std, rng),
            bias: bias.then(|| Param::zeros(&[out_ch])),
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let s = self.weight.shape();
        self.weight
            .value
            .view()
            .into_shape_with_order((s[0], s[1] * s[2] * s[3]))
            .expect("conv weight is contiguous")
    }

    /// Frames per im2col chunk for an input of `c` channels.
    fn chunk_frames(&self, c: usize, ho: usize, wo: usize) -> usize {
        (COLS_CHUNK / (c * self.kernel * self.kernel * ho * wo).max(1)).max(1)
    }

    pub fn forward(&mut self, x: &Array4<f64>, ctx: Ctx) -> Result<Array4<f64>> {
        let (c, b, h, w) = x.dim();
        if c != self.in_channels() {
            return Err(shape_err("conv2d input channels", self.in_channels(), c));
        }
        let (ho, wo) = self.out_size(h, w);
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let out_ch = self.out_channels();
        let plane = ho * wo;
        let mut y = Array2::zeros((out_ch, b * plane));
        let step = self.chunk_frames(c, ho, wo);
        for b0 in (0..b).step_by(step) {
            let b1 = (b0 + step).min(b);
            let cols = im2col(xs, (c, b, h, w), b0..b1, self.kernel, self.stride, self.padding, ho, wo);
            let mut dst = y.slice_mut(s![.., b0 * plane..b1 * plane]);
            general_mat_mul(1.0, &self.weight_matrix(), &cols, 0.0, &mut dst);
        }
        if let Some(bias) = &self.bias {
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(bias.value.iter()) {
                row += bv;
            }
        }
        if ctx.record {
            self.cache = Some(ConvCache { input: x.clone() });
        }
        Ok(y.into_shape_with_order((out_ch, b, ho, wo)).expect("gemm output is contiguous"))
    }

    /// Accumulates weight gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, dy: &Array4<f64>, need_input_grad: bool) -> Option<Array4<f64>> {
        let cache = self.cache.take().expect("conv2d backward without recorded forward");
        let (co, b, ho, wo) = dy.dim();
        let plane = ho * wo;
        let dy = dy.as_standard_layout();
        let dy2 = dy
            .view()
            .into_shape_with_order((co, b * plane))
            .expect("dy is contiguous");
        let in_dim = cache.input.dim();
        let (c, _, h, w) = in_dim;
        let xs = cache.input.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let ws = self.weight.shape().to_vec();
        let mut dw = Array2::zeros((co, c * self.kernel * self.kernel));
        let mut dx = need_input_grad.then(|| vec![0.0; c * b * h * w]);
        let step = self.chunk_frames(c, ho, wo);
        for b0 in (0..b).step_by(step) {
            let b1 = (b0 + step).min(b);
            let dyc = dy2.slice(s![.., b0 * plane..b1 * plane]);
            let cols = im2col(xs, in_dim, b0..b1, self.kernel, self.stride, self.padding, ho, wo);
            general_mat_mul(1.0, &dyc, &cols.t(), 1.0, &mut dw);
            if let Some(dx) = dx.as_mut() {
                let dcols = self.weight_matrix().t().dot(&dyc);
                col2im(&dcols, dx, in_dim, b0..b1, self.kernel, self.stride, self.padding, ho, wo);
            }
        }
        self.weight.grad += &dw.into_shape_with_order(IxDyn(&ws)).expect("shape");
        if let Some(bias) = &mut self.bias {
            let db = dy2.sum_axis(Axis(1)).into_dyn();
            bias.grad += &db;
        }
        dx.map(|dx| Array4::from_shape_vec(in_dim, dx).expect("col2im shape"))
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox*s + kx - p` is in range.
fn valid_cols(kx: usize, s: usize, p: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if w + p > kx { (w + p - kx).div_ceil(s).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Columns for frames `frames` of a `(C, B, H, W)` input: one row per
/// `(channel, ky, kx)`, one column per output pixel of those frames.
#[allow(clippy::too_many_arguments)]
fn im2col(
    xs: &[f64],
    in_dim: (usize, usize, usize, usize),
    frames: Range<usize>,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, b, h, w) = in_dim;
    let nb = frames.len();
    let n = nb * ho * wo;
    let mut cols = vec![0.0; c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                let (lo, hi) = valid_cols(kx, s, p, w, wo);
                for (j, bi) in frames.clone().enumerate() {
                    let xbase = (ci * b + bi) * h * w;
                    let cbase = row + j * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let crow = cbase + oy * wo;
                        if s == 1 {
                            let x0 = xrow + lo + kx - p;
                            cols[crow + lo..crow + hi].copy_from_slice(&xs[x0..x0 + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                cols[crow + ox] = xs[xrow + ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, n), cols).expect("im2col shape")
}

/// Scatters column gradients of frames `frames` back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    dx: &mut [f64],
    in_dim: (usize, usize, usize, usize),
    frames: Range<usize>,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
) {
    let (c, b, h, w) = in_dim;
    let n = frames.len() * ho * wo;
    let dc = dcols.as_standard_layout();
    let dc = dc.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                let (lo, hi) = valid_cols(kx, s, p, w, wo);
                for (j, bi) in frames.clone().enumerate() {
                    let xbase = (ci * b + bi) * h * w;
                    let cbase = row + j * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let crow = cbase + oy * wo;
                        if s == 1 {
                            let x0 = xrow + lo + kx - p;
                            for (d, g) in dx[x0..x0 + hi - lo].iter_mut().zip(&dc[crow + lo..crow + hi]) {
                                *d += g;
                            }
                        } else {
                            for ox in lo..hi {
                                dx[xrow + ox * s + kx - p] += dc[crow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Batch normalization over a `(C, M)` matrix: statistics per row.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<NormCache>,
}

#[derive(Clone, Debug)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward_cm(&mut self, x: ArrayView2<f64>, ctx: Ctx) -> Result<Array2<f64>> {
        let (c, m) = x.dim();
        if c != self.channels() {
            return Err(shape_err("batch norm channels", self.channels(), c));
        }
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(c);
        for (ch, mut row) in xhat.axis_iter_mut(Axis(0)).enumerate() {
            let (mean, var) = if ctx.training {
                let mean = row.sum() / m as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let mom = self.momentum;
                let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
                let rm = &mut self.running_mean.value[ch];
                *rm = (1.0 - mom) * *rm + mom * mean;
                let rv = &mut self.running_var.value[ch];
                *rv = (1.0 - mom) * *rv + mom * unbiased;
                (mean, var)
            } else {
                (self.running_mean.value[ch], self.running_var.value[ch])
            };
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = inv;
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let mut y = xhat.clone();
        for (ch, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            row.mapv_inplace(|v| g * v + b);
        }
        if ctx.record {
            self.cache = Some(NormCache {
                xhat,
                inv_std,
                batch_stats: ctx.training,
            });
        }
        Ok(y)
    }

    pub fn backward_cm(&mut self, dy: ArrayView2<f64>) -> Array2<f64> {
        let cache = self.cache.take().expect("batch norm backward without recorded forward");
        let (c, m) = dy.dim();
        let mut dx = Array2::zeros((c, m));
        for ch in 0..c {
            let dyr = dy.row(ch);
            let xh = cache.xhat.row(ch);
            let sum_dy = dyr.sum();
            let sum_dyx = dyr.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
            self.gamma.grad[ch] += sum_dyx;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let inv = cache.inv_std[ch];
            let mut dxr = dx.row_mut(ch);
            if cache.batch_stats {
                let mf = m as f64;
                let scale = g * inv / mf;
                for i in 0..m {
                    dxr[i] = scale * (mf * dyr[i] - sum_dy - xh[i] * sum_dyx);
                }
            } else {
                for i in 0..m {
                    dxr[i] = g * inv * dyr[i];
                }
            }
        }
        dx
    }

    /// `(C, B, H, W)` activations.
    pub fn forward4(&mut self, x: &Array4<f64>, ctx: Ctx) -> Result<Array4<f64>> {
        let d = x.dim();
        let x = x.as_standard_layout();
        let x2 = x.view().into_shape_with_order((d.0, d.1 * d.2 * d.3)).expect("contiguous");
        Ok(self.forward_cm(x2, ctx)?.into_shape_with_order(d).expect("shape"))
    }

    pub fn backward4(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = dy.dim();
        let dy = dy.as_standard_layout();
        let dy2 = dy.view().into_shape_with_order((d.0, d.1 * d.2 * d.3)).expect("contiguous");
        self.backward_cm(dy2).into_shape_with_order(d).expect("shape")
    }

    /// `(rows, C)` feature matrices.
    pub fn forward_rows(&mut self, x: ArrayView2<f64>, ctx: Ctx) -> Result<Array2<f64>> {
        Ok(self.forward_cm(x.t(), ctx)?.reversed_axes().as_standard_layout().into_owned())
    }

    pub fn backward_rows(&mut self, dy: ArrayView2<f64>) -> Array2<f64> {
        self.backward_cm(dy.t()).reversed_axes().as_standard_layout().into_owned()
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Layer normalization across the channels of each row.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
    cache: Option<NormCache>,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: ArrayView2<f64>, ctx: Ctx) -> Result<Array2<f64>> {
        let (rows, c) = x.dim();
        if c != self.gamma.value.len() {
            return Err(shape_err("layer norm channels", self.gamma.value.len(), c));
        }
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(rows);
        for (r, mut row) in xhat.axis_iter_mut(Axis(0)).enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[r] = inv;
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let g = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().expect("1d");
        let b = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().expect("1d");
        let y = &xhat * &g + &b;
        if ctx.record {
            self.cache = Some(NormCache {
                xhat,
                inv_std,
                batch_stats: true,
            });
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: ArrayView2<f64>) -> Array2<f64> {
        let cache = self.cache.take().expect("layer norm backward without recorded forward");
        let (rows, c) = dy.dim();
        let cf = c as f64;
        let mut dx = Array2::zeros((rows, c));
        for r in 0..rows {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for j in 0..c {
                let d = dy[[r, j]];
                let xh = cache.xhat[[r, j]];
                self.gamma.grad[j] += d * xh;
                self.beta.grad[j] += d;
                let gd = d * self.gamma.value[j];
                sum_g += gd;
                sum_gx += gd * xh;
            }
            let inv = cache.inv_std[r];
            for j in 0..c {
                let gd = dy[[r, j]] * self.gamma.value[j];
                dx[[r, j]] = inv / cf * (cf * gd - sum_g - cache.xhat[[r, j]] * sum_gx);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Row-wise affine map `y = x W^T + b`, i.e. a kernel-size-1 convolution
/// over a `(frames, channels)` sequence.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, init_std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::gaussian(&[out_dim, in_dim], init_std, rng),
            bias: Param::zeros(&[out_dim]),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn w(&self) -> ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality().expect("2d weight")
    }

    pub fn forward(&mut self, x: ArrayView2<f64>, ctx: Ctx) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(shape_err("linear input width", self.in_dim(), x.ncols()));
        }
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1d");
        let y = x.dot(&self.w().t()) + &b;
        if ctx.record {
            self.cache = Some(x.to_owned());
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: ArrayView2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("linear backward without recorded forward");
        let dw = dy.t().dot(&x).into_dyn();
        self.weight.grad += &dw;
        let db = dy.sum_axis(Axis(0)).into_dyn();
        self.bias.grad += &db;
        dy.dot(&self.w())
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward<D: ndarray::Dimension>(
    out: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(out, |d, &o| {
        if o <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// 3x3 max pooling, stride 2, padding 1.
#[derive(Clone, Debug, Default)]
pub struct MaxPool {
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool {
    pub fn out_size(h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1)
    }

    pub fn forward(&mut self, x: &Array4<f64>, ctx: Ctx) -> Array4<f64> {
        let (c, b, h, w) = x.dim();
        let (ho, wo) = Self::out_size(h, w);
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = vec![0.0; c * b * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..c * b {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if xs[i] > best {
                                best = xs[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        if ctx.record {
            self.cache = Some((arg, (c, b, h, w)));
        }
        Array4::from_shape_vec((c, b, ho, wo), out).expect("shape")
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let (arg, dim) = self.cache.take().expect("max pool backward without recorded forward");
        let mut dx = vec![0.0; dim.0 * dim.1 * dim.2 * dim.3];
        for (g, &i) in dy.iter().zip(arg.iter()) {
            dx[i] += g;
        }
        Array4::from_shape_vec(dim, dx).expect("shape")
    }
}

/// Spatial mean of every `(channel, frame)` plane: `(C, B, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (c, b, h, w) = x.dim();
    let hw = (h * w) as f64;
    let mut out = Array2::zeros((b, c));
    for ci in 0..c {
        for bi in 0..b {
            out[[bi, ci]] = x.slice(ndarray::s![ci, bi, .., ..]).sum() / hw;
        }
    }
    out
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c) = dy.dim();
    let hw = (h * w) as f64;
    Array4::from_shape_fn((c, b, h, w), |(ci, bi, _, _)| dy[[bi, ci]] / hw)
}

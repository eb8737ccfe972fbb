//! Parameterized building blocks with hand-written backward passes.
//!
//! Window tensors use the channels-last layout `[N, S, W, C]`: N timestamps
//! (rows), S scales, W window offsets, C channels. Every forward returns what
//! its backward needs; parameter gradients accumulate into a zero-initialized
//! value of the same type as the layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Trainable weight.
    Param,
    /// Non-trainable state (normalization running statistics).
    Buffer,
}

/// Named traversal over every tensor a layer owns, in a fixed order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Copy of `m` with every tensor zeroed; used as a gradient accumulator.
pub fn zeros_like<M: Module + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.visit_mut("", &mut |_, _, t| t.fill(0.0));
    z
}

pub fn param_count<M: Module>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, kind, t| {
        if kind == TensorKind::Param {
            n += t.len()
        }
    });
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Sigmoid-weighted linear unit, `x * sigmoid(x)`.
    #[default]
    Silu,
    /// Linear test mode.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at the pre-activation value `x`.
    #[inline]
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        if self != Activation::Identity {
            y.data_mut().iter_mut().for_each(|v| *v = self.apply(*v));
        }
        y
    }

    /// Derivative at `x` given the forward output `y = act(x)`; recovers the
    /// sigmoid as `y / x` instead of recomputing it.
    #[inline]
    pub fn grad_from(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = if x == 0.0 { 0.5 } else { y / x };
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }

    /// `dy * act'(pre)`, elementwise; `post` is the forward output.
    pub fn backward(self, pre: &Tensor, post: &Tensor, dy: &Tensor) -> Tensor {
        let mut dx = dy.clone();
        if self != Activation::Identity {
            for ((g, &x), &y) in dx.data_mut().iter_mut().zip(pre.data()).zip(post.data()) {
                *g *= self.grad_from(x, y);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Dense

/// Affine map over the last axis: `y = x·Wᵀ + b`, `W` is `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (1.0 / input.max(1) as f64).sqrt();
        Dense {
            weight: Tensor::randn(&[output, input], std, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dim(0)
    }

    /// Multiply-accumulates per input row.
    pub fn macs(&self) -> u64 {
        (self.input_dim() * self.output_dim()) as u64
    }

    /// Applies the map to every length-`in` row of `x`; the leading shape is kept.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (i, o) = (self.input_dim(), self.output_dim());
        let rows = x.len() / i;
        debug_assert_eq!(rows * i, x.len());
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = o;
        let mut y = Tensor::zeros(&shape);
        {
            let yd = y.data_mut();
            for r in 0..rows {
                yd[r * o..(r + 1) * o].copy_from_slice(self.bias.data());
            }
            gemm(
                rows,
                i,
                o,
                x.data(),
                (i, 1),
                self.weight.data(),
                (1, i),
                1.0,
                yd,
                (o, 1),
            );
        }
        y
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut Dense) -> Tensor {
        let (i, o) = (self.input_dim(), self.output_dim());
        let rows = x.len() / i;
        // dW += dyᵀ·x
        gemm(
            o,
            rows,
            i,
            dy.data(),
            (1, o),
            x.data(),
            (i, 1),
            1.0,
            grads.weight.data_mut(),
            (i, 1),
        );
        let gb = grads.bias.data_mut();
        for r in 0..rows {
            for (g, d) in gb.iter_mut().zip(&dy.data()[r * o..(r + 1) * o]) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            rows,
            o,
            i,
            dy.data(),
            (o, 1),
            self.weight.data(),
            (i, 1),
            0.0,
            dx.data_mut(),
            (i, 1),
        );
        dx
    }
}

impl Module for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.weight);
        f(&join(prefix, "bias"), TensorKind::Param, &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        f(&join(prefix, "weight"), TensorKind::Param, &mut self.weight);
        f(&join(prefix, "bias"), TensorKind::Param, &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Window-axis helpers on [N, S, W, C]

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims4 {
    pub n: usize,
    pub s: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims4 {
    pub fn of(t: &Tensor) -> Self {
        let sh = t.shape();
        assert_eq!(sh.len(), 4, "expected [N, S, W, C], got {sh:?}");
        Dims4 {
            n: sh[0],
            s: sh[1],
            w: sh[2],
            c: sh[3],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.s, self.w, self.c]
    }

    #[inline]
    pub fn idx(&self, n: usize, s: usize, w: usize, c: usize) -> usize {
        ((n * self.s + s) * self.w + w) * self.c + c
    }
}

/// First-order temporal difference along the window axis with a zero front pad.
pub fn temporal_diff(x: &Tensor) -> Tensor {
    let d = Dims4::of(x);
    let mut y = Tensor::zeros(x.shape());
    let (xd, yd) = (x.data(), y.data_mut());
    let row = d.w * d.c;
    for base in (0..x.len()).step_by(row) {
        for w in 1..d.w {
            let cur = base + w * d.c;
            let prev = cur - d.c;
            for c in 0..d.c {
                yd[cur + c] = xd[cur + c] - xd[prev + c];
            }
        }
    }
    y
}

/// Adjoint of [`temporal_diff`].
pub fn temporal_diff_backward(dy: &Tensor) -> Tensor {
    let d = Dims4::of(dy);
    let mut dx = Tensor::zeros(dy.shape());
    let (g, out) = (dy.data(), dx.data_mut());
    let row = d.w * d.c;
    for base in (0..dy.len()).step_by(row) {
        for w in 1..d.w {
            let cur = base + w * d.c;
            let prev = cur - d.c;
            for c in 0..d.c {
                out[cur + c] += g[cur + c];
                out[prev + c] -= g[cur + c];
            }
        }
    }
    dx
}

/// Stride-1, kernel-3 max pooling along the window axis; edges replicate.
/// Returns the pooled tensor and the winning source offset per element.
pub fn max_pool3(x: &Tensor) -> (Tensor, Vec<u32>) {
    let d = Dims4::of(x);
    let mut y = Tensor::zeros(x.shape());
    let mut arg = vec![0u32; x.len()];
    let xd = x.data();
    let yd = y.data_mut();
    let row = d.w * d.c;
    for base in (0..x.len()).step_by(row) {
        for w in 0..d.w {
            let lo = w.saturating_sub(1);
            let hi = (w + 1).min(d.w - 1);
            for c in 0..d.c {
                let mut best = lo;
                let mut v = xd[base + lo * d.c + c];
                for cand in lo + 1..=hi {
                    let u = xd[base + cand * d.c + c];
                    if u > v {
                        v = u;
                        best = cand;
                    }
                }
                yd[base + w * d.c + c] = v;
                arg[base + w * d.c + c] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool3_backward(dy: &Tensor, arg: &[u32]) -> Tensor {
    let d = Dims4::of(dy);
    let mut dx = Tensor::zeros(dy.shape());
    let g = dy.data();
    let out = dx.data_mut();
    let row = d.w * d.c;
    for base in (0..dy.len()).step_by(row) {
        for w in 0..d.w {
            for c in 0..d.c {
                let i = base + w * d.c + c;
                out[base + arg[i] as usize * d.c + c] += g[i];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Depthwise temporal convolution

/// Kernel-3 depthwise convolution along the window axis, replicate padding.
///
/// With `per_scale` the kernels are indexed by folded channel `s*C + c`;
/// otherwise one kernel per channel is shared across scales.
#[derive(Debug, Clone, PartialEq)]
pub struct DwConv3 {
    /// `[channels, 3]`, tap 0 reads offset `w-1`.
    pub kernel: Tensor,
    pub bias: Tensor,
    pub per_scale: bool,
}

impl DwConv3 {
    pub fn new<R: Rng>(channels: usize, per_scale: bool, rng: &mut R) -> Self {
        let mut kernel = Tensor::randn(&[channels, 3], 0.2, rng);
        // centre tap starts near identity
        for ch in 0..channels {
            kernel.data_mut()[ch * 3 + 1] += 1.0;
        }
        DwConv3 {
            kernel,
            bias: Tensor::zeros(&[channels]),
            per_scale,
        }
    }

    pub fn identity(channels: usize, per_scale: bool) -> Self {
        let mut kernel = Tensor::zeros(&[channels, 3]);
        for ch in 0..channels {
            kernel.data_mut()[ch * 3 + 1] = 1.0;
        }
        DwConv3 {
            kernel,
            bias: Tensor::zeros(&[channels]),
            per_scale,
        }
    }

    #[inline]
    fn channel(&self, d: &Dims4, s: usize, c: usize) -> usize {
        if self.per_scale {
            s * d.c + c
        } else {
            c
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let d = Dims4::of(x);
        let mut y = Tensor::zeros(x.shape());
        let (xd, k, b) = (x.data(), self.kernel.data(), self.bias.data());
        let yd = y.data_mut();
        for n in 0..d.n {
            for s in 0..d.s {
                let base = d.idx(n, s, 0, 0);
                for w in 0..d.w {
                    let wm = base + w.saturating_sub(1) * d.c;
                    let w0 = base + w * d.c;
                    let wp = base + (w + 1).min(d.w - 1) * d.c;
                    for c in 0..d.c {
                        let ch = self.channel(&d, s, c);
                        let kk = &k[ch * 3..ch * 3 + 3];
                        yd[w0 + c] =
                            b[ch] + kk[0] * xd[wm + c] + kk[1] * xd[w0 + c] + kk[2] * xd[wp + c];
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut DwConv3) -> Tensor {
        let d = Dims4::of(x);
        let mut dx = Tensor::zeros(x.shape());
        let (xd, g, k) = (x.data(), dy.data(), self.kernel.data());
        let out = dx.data_mut();
        let gk = grads.kernel.data_mut();
        let gb = grads.bias.data_mut();
        for n in 0..d.n {
            for s in 0..d.s {
                let base = d.idx(n, s, 0, 0);
                for w in 0..d.w {
                    let wm = base + w.saturating_sub(1) * d.c;
                    let w0 = base + w * d.c;
                    let wp = base + (w + 1).min(d.w - 1) * d.c;
                    for c in 0..d.c {
                        let ch = self.channel(&d, s, c);
                        let gy = g[w0 + c];
                        gb[ch] += gy;
                        gk[ch * 3] += gy * xd[wm + c];
                        gk[ch * 3 + 1] += gy * xd[w0 + c];
                        gk[ch * 3 + 2] += gy * xd[wp + c];
                        out[wm + c] += gy * k[ch * 3];
                        out[w0 + c] += gy * k[ch * 3 + 1];
                        out[wp + c] += gy * k[ch * 3 + 2];
                    }
                }
            }
        }
        dx
    }
}

impl Module for DwConv3 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        f(&join(prefix, "kernel"), TensorKind::Param, &self.kernel);
        f(&join(prefix, "bias"), TensorKind::Param, &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        f(&join(prefix, "kernel"), TensorKind::Param, &mut self.kernel);
        f(&join(prefix, "bias"), TensorKind::Param, &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per folded channel `(s, c)` normalization of `[N, S, W, C]`, statistics
/// over `(N, W)`.
///
/// Training mode normalizes with batch statistics; inference mode applies the
/// frozen affine map `gamma * (x - mean) / sqrt(var) + beta`. The stored
/// running variance already includes the epsilon, so it stays positive.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    train: bool,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> (Tensor, BnCache) {
        let d = Dims4::of(x);
        let chans = d.s * d.c;
        let xd = x.data();
        let (mean, var_for_norm, batch_var) = if train {
            let m = (d.n * d.w) as f64;
            let mut mean = vec![0.0; chans];
            for n in 0..d.n {
                for s in 0..d.s {
                    for w in 0..d.w {
                        let base = d.idx(n, s, w, 0);
                        for c in 0..d.c {
                            mean[s * d.c + c] += xd[base + c];
                        }
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            let mut var = vec![0.0; chans];
            for n in 0..d.n {
                for s in 0..d.s {
                    for w in 0..d.w {
                        let base = d.idx(n, s, w, 0);
                        for c in 0..d.c {
                            let e = xd[base + c] - mean[s * d.c + c];
                            var[s * d.c + c] += e * e;
                        }
                    }
                }
            }
            let norm: Vec<f64> = var.iter().map(|v| v / m + BN_EPS).collect();
            let unbiased: Vec<f64> = var
                .iter()
                .map(|v| v / (m - 1.0).max(1.0) + BN_EPS)
                .collect();
            (mean, norm, unbiased)
        } else {
            (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
                Vec::new(),
            )
        };
        let inv_std: Vec<f64> = var_for_norm.iter().map(|v| 1.0 / v.sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        {
            let (g, b) = (self.gamma.data(), self.beta.data());
            let xh = xhat.data_mut();
            let yd = y.data_mut();
            for n in 0..d.n {
                for s in 0..d.s {
                    for w in 0..d.w {
                        let base = d.idx(n, s, w, 0);
                        for c in 0..d.c {
                            let ch = s * d.c + c;
                            let h = (xd[base + c] - mean[ch]) * inv_std[ch];
                            xh[base + c] = h;
                            yd[base + c] = g[ch] * h + b[ch];
                        }
                    }
                }
            }
        }
        let cache = BnCache {
            xhat,
            inv_std,
            train,
            batch_mean: if train { mean } else { Vec::new() },
            batch_var,
        };
        (y, cache)
    }

    pub fn backward(&self, cache: &BnCache, dy: &Tensor, grads: &mut BatchNorm) -> Tensor {
        let d = Dims4::of(dy);
        let chans = d.s * d.c;
        let (g, xh) = (dy.data(), cache.xhat.data());
        let mut sum_dy = vec![0.0; chans];
        let mut sum_dy_xhat = vec![0.0; chans];
        for n in 0..d.n {
            for s in 0..d.s {
                for w in 0..d.w {
                    let base = d.idx(n, s, w, 0);
                    for c in 0..d.c {
                        let ch = s * d.c + c;
                        sum_dy[ch] += g[base + c];
                        sum_dy_xhat[ch] += g[base + c] * xh[base + c];
                    }
                }
            }
        }
        for ch in 0..chans {
            grads.gamma.data_mut()[ch] += sum_dy_xhat[ch];
            grads.beta.data_mut()[ch] += sum_dy[ch];
        }
        let gamma = self.gamma.data();
        let m = (d.n * d.w) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        let out = dx.data_mut();
        for n in 0..d.n {
            for s in 0..d.s {
                for w in 0..d.w {
                    let base = d.idx(n, s, w, 0);
                    for c in 0..d.c {
                        let ch = s * d.c + c;
                        let k = gamma[ch] * cache.inv_std[ch];
                        out[base + c] = if cache.train {
                            k * (g[base + c]
                                - sum_dy[ch] / m
                                - xh[base + c] * sum_dy_xhat[ch] / m)
                        } else {
                            k * g[base + c]
                        };
                    }
                }
            }
        }
        dx
    }

    /// Folds the batch statistics of a training forward into the running ones:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, cache: &BnCache, momentum: f64) {
        if !cache.train {
            return;
        }
        let rm = self.running_mean.data_mut();
        for (r, b) in rm.iter_mut().zip(&cache.batch_mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        let rv = self.running_var.data_mut();
        for (r, b) in rv.iter_mut().zip(&cache.batch_var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        f(&join(prefix, "gamma"), TensorKind::Param, &self.gamma);
        f(&join(prefix, "beta"), TensorKind::Param, &self.beta);
        f(&join(prefix, "running_mean"), TensorKind::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), TensorKind::Buffer, &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        f(&join(prefix, "gamma"), TensorKind::Param, &mut self.gamma);
        f(&join(prefix, "beta"), TensorKind::Param, &mut self.beta);
        f(&join(prefix, "running_mean"), TensorKind::Buffer, &mut self.running_mean);
        f(&join(prefix, "running_var"), TensorKind::Buffer, &mut self.running_var);
    }
}

// ---------------------------------------------------------------------------
// 3x3 convolution on square maps

/// Zero-padded, stride-1 3×3 convolution over `[N, H, W, Cin]` maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d3 {
    /// `[9 * Cin, Cout]`, rows ordered `(ky, kx, cin)`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d3 {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let std = (1.0 / (9 * cin).max(1) as f64).sqrt();
        Conv2d3 {
            weight: Tensor::randn(&[9 * cin, cout], std, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.dim(0) / 9
    }

    pub fn cout(&self) -> usize {
        self.weight.dim(1)
    }

    /// Multiply-accumulates per output pixel.
    pub fn macs_per_pixel(&self) -> u64 {
        (9 * self.cin() * self.cout()) as u64
    }

    /// Row `y*w + x` of `col` holds the 3×3 neighbourhood of pixel `(y, x)`,
    /// ordered `(ky, kx, cin)`, zeros outside the map.
    fn im2col(x: &[f64], h: usize, w: usize, cin: usize, col: &mut [f64]) {
        let k = 9 * cin;
        let span = 3 * cin;
        for y in 0..h {
            for xx in 0..w {
                let row = &mut col[(y * w + xx) * k..(y * w + xx + 1) * k];
                for ky in 0..3 {
                    let dst = &mut row[ky * span..(ky + 1) * span];
                    if y + ky == 0 || y + ky > h {
                        dst.fill(0.0);
                        continue;
                    }
                    let line = &x[(y + ky - 1) * w * cin..(y + ky) * w * cin];
                    if xx == 0 {
                        dst[..cin].fill(0.0);
                        let n = (2 * cin).min(line.len());
                        dst[cin..cin + n].copy_from_slice(&line[..n]);
                        dst[cin + n..].fill(0.0);
                    } else if xx + 1 == w {
                        dst[..2 * cin].copy_from_slice(&line[(xx - 1) * cin..]);
                        dst[2 * cin..].fill(0.0);
                    } else {
                        dst.copy_from_slice(&line[(xx - 1) * cin..(xx + 2) * cin]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Conv2d3::im2col`]: scatters `col` rows back onto the map.
    fn col2im(col: &[f64], h: usize, w: usize, cin: usize, x: &mut [f64]) {
        let k = 9 * cin;
        let span = 3 * cin;
        for y in 0..h {
            for xx in 0..w {
                let row = &col[(y * w + xx) * k..(y * w + xx + 1) * k];
                for ky in 0..3 {
                    if y + ky == 0 || y + ky > h {
                        continue;
                    }
                    let src = &row[ky * span..(ky + 1) * span];
                    let line = &mut x[(y + ky - 1) * w * cin..(y + ky) * w * cin];
                    let (from, to, skip) = if xx == 0 {
                        (0, (2 * cin).min(line.len()), cin)
                    } else if xx + 1 == w {
                        ((xx - 1) * cin, line.len(), 0)
                    } else {
                        ((xx - 1) * cin, (xx + 2) * cin, 0)
                    };
                    for (o, v) in line[from..to].iter_mut().zip(&src[skip..]) {
                        *o += v;
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let sh = x.shape();
        let (n, h, w, cin) = (sh[0], sh[1], sh[2], sh[3]);
        let cout = self.cout();
        let k = 9 * cin;
        let pix = h * w;
        let mut y = Tensor::zeros(&[n, h, w, cout]);
        let mut col = vec![0.0; pix * k];
        let yd = y.data_mut();
        for i in 0..n {
            Self::im2col(&x.data()[i * pix * cin..(i + 1) * pix * cin], h, w, cin, &mut col);
            let out = &mut yd[i * pix * cout..(i + 1) * pix * cout];
            for p in 0..pix {
                out[p * cout..(p + 1) * cout].copy_from_slice(self.bias.data());
            }
            gemm(
                pix,
                k,
                cout,
                &col,
                (k, 1),
                self.weight.data(),
                (cout, 1),
                1.0,
                out,
                (cout, 1),
            );
        }
        y
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut Conv2d3) -> Tensor {
        let sh = x.shape();
        let (n, h, w, cin) = (sh[0], sh[1], sh[2], sh[3]);
        let cout = self.cout();
        let k = 9 * cin;
        let pix = h * w;
        let mut dx = Tensor::zeros(sh);
        let mut col = vec![0.0; pix * k];
        let mut dcol = vec![0.0; pix * k];
        for i in 0..n {
            let g = &dy.data()[i * pix * cout..(i + 1) * pix * cout];
            Self::im2col(&x.data()[i * pix * cin..(i + 1) * pix * cin], h, w, cin, &mut col);
            // dW += colᵀ·g
            gemm(
                k,
                pix,
                cout,
                &col,
                (1, k),
                g,
                (cout, 1),
                1.0,
                grads.weight.data_mut(),
                (cout, 1),
            );
            let gb = grads.bias.data_mut();
            for p in 0..pix {
                for (b, v) in gb.iter_mut().zip(&g[p * cout..(p + 1) * cout]) {
                    *b += v;
                }
            }
            // dcol = g·Wᵀ
            gemm(
                pix,
                cout,
                k,
                g,
                (cout, 1),
                self.weight.data(),
                (1, cout),
                0.0,
                &mut dcol,
                (k, 1),
            );
            Self::col2im(&dcol, h, w, cin, &mut dx.data_mut()[i * pix * cin..(i + 1) * pix * cin]);
        }
        dx
    }
}

impl Module for Conv2d3 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.weight);
        f(&join(prefix, "bias"), TensorKind::Param, &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        f(&join(prefix, "weight"), TensorKind::Param, &mut self.weight);
        f(&join(prefix, "bias"), TensorKind::Param, &mut self.bias);
    }
}

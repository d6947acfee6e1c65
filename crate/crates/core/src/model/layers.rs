//! Network layers with explicit forward and backward passes.
//!
//! Each layer caches what its backward pass needs during a training-mode
//! forward call. Backward calls must mirror forward calls in reverse order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{parameterized, Param, Tensor};

const NORM_EPS: f32 = 1e-5;

/// 2-D convolution with optional grouping and bias, computed via im2col + sgemm.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    /// Skip the input gradient (first layer of the network).
    pub input_grad: bool,
    cache: Option<Tensor>,
}

parameterized!(Conv2d { weight, bias });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvShape {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel
    }
}

impl Conv2d {
    /// Builds a convolution with He (fan-out) normal weights and zero bias.
    pub fn new(shape: ConvShape, rng: &mut impl Rng) -> Self {
        assert!(
            shape.in_channels.is_multiple_of(shape.groups) && shape.out_channels.is_multiple_of(shape.groups),
            "channels must divide by groups"
        );
        let fan_out = (shape.out_channels * shape.kernel * shape.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("valid std");
        let value: Vec<f32> = (0..shape.weight_len())
            .map(|_| normal.sample(rng) as f32)
            .collect();
        Self::from_weights(shape, value, shape.bias.then(|| vec![0.0; shape.out_channels]))
    }

    /// Glorot-uniform weights, for output projections whose fan-out is small.
    /// All-zero weights and bias.
    pub fn zeroed(shape: ConvShape) -> Self {
        Self::from_weights(
            shape,
            vec![0.0; shape.weight_len()],
            shape.bias.then(|| vec![0.0; shape.out_channels]),
        )
    }

    pub fn from_weights(shape: ConvShape, weight: Vec<f32>, bias: Option<Vec<f32>>) -> Self {
        assert_eq!(weight.len(), shape.weight_len());
        let k = shape.kernel;
        Self {
            in_channels: shape.in_channels,
            out_channels: shape.out_channels,
            kernel: k,
            stride: shape.stride,
            padding: shape.padding,
            groups: shape.groups,
            weight: Param::new(
                vec![shape.out_channels, shape.in_channels / shape.groups, k, k],
                weight,
            ),
            bias: bias.map(|b| Param::new(vec![shape.out_channels], b)),
            input_grad: true,
            cache: None,
        }
    }

    pub fn shape(&self) -> ConvShape {
        ConvShape {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
            bias: self.bias.is_some(),
        }
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward_train(&mut self, x: Tensor) -> Tensor {
        let out = self.infer(&x);
        self.cache = Some(x);
        out
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            x.c(),
            self.in_channels,
            "conv expects {} input channels",
            self.in_channels
        );
        let shape = self.shape();
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = (shape.out_size(h), shape.out_size(w));
        let mut out = Tensor::zeros(x.n(), self.out_channels, ho, wo);
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let kk = cin_g * self.kernel * self.kernel;
        let spatial = ho * wo;
        let mut col = if self.pointwise() {
            Vec::new()
        } else {
            vec![0.0f32; kk * spatial]
        };
        for n in 0..x.n() {
            let input = x.sample(n);
            let output = out.sample_mut(n);
            for g in 0..self.groups {
                let src = &input[g * cin_g * h * w..(g + 1) * cin_g * h * w];
                let b: &[f32] = if self.pointwise() {
                    src
                } else {
                    im2col(src, cin_g, h, w, &shape, ho, wo, &mut col);
                    &col
                };
                let wg = &self.weight.value[g * cout_g * kk..(g + 1) * cout_g * kk];
                let dst = &mut output[g * cout_g * spatial..(g + 1) * cout_g * spatial];
                // SAFETY: all slices are sized for the (m, k, n) product below.
                unsafe {
                    matrixmultiply::sgemm(
                        cout_g,
                        kk,
                        spatial,
                        1.0,
                        wg.as_ptr(),
                        kk as isize,
                        1,
                        b.as_ptr(),
                        spatial as isize,
                        1,
                        0.0,
                        dst.as_mut_ptr(),
                        spatial as isize,
                        1,
                    );
                }
            }
            if let Some(bias) = &self.bias {
                for (c, plane) in output.chunks_exact_mut(spatial).enumerate() {
                    let b = bias.value[c];
                    plane.iter_mut().for_each(|v| *v += b);
                }
            }
        }
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Option<Tensor> {
        let x = self.cache.take().expect("conv backward without training forward");
        let shape = self.shape();
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = (grad.h(), grad.w());
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let kk = cin_g * self.kernel * self.kernel;
        let spatial = ho * wo;
        let pointwise = self.pointwise();
        let mut grad_in = self
            .input_grad
            .then(|| Tensor::zeros(x.n(), self.in_channels, h, w));
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![0.0f32; kk * spatial]
        };
        let mut dcol = if pointwise || !self.input_grad {
            Vec::new()
        } else {
            vec![0.0f32; kk * spatial]
        };
        self.weight.grad_mut();
        let (weight, wgrad) = (&self.weight.value, &mut self.weight.grad);
        for n in 0..x.n() {
            let input = x.sample(n);
            let dy = grad.sample(n);
            for g in 0..self.groups {
                let src = &input[g * cin_g * h * w..(g + 1) * cin_g * h * w];
                let b: &[f32] = if pointwise {
                    src
                } else {
                    im2col(src, cin_g, h, w, &shape, ho, wo, &mut col);
                    &col
                };
                let dyg = &dy[g * cout_g * spatial..(g + 1) * cout_g * spatial];
                let dw = &mut wgrad[g * cout_g * kk..(g + 1) * cout_g * kk];
                // SAFETY: dW[cout_g x kk] += dY[cout_g x spatial] * col^T[spatial x kk].
                unsafe {
                    matrixmultiply::sgemm(
                        cout_g,
                        spatial,
                        kk,
                        1.0,
                        dyg.as_ptr(),
                        spatial as isize,
                        1,
                        b.as_ptr(),
                        1,
                        spatial as isize,
                        1.0,
                        dw.as_mut_ptr(),
                        kk as isize,
                        1,
                    );
                }
                if let Some(gi) = grad_in.as_mut() {
                    let wg = &weight[g * cout_g * kk..(g + 1) * cout_g * kk];
                    let dst_full = gi.sample_mut(n);
                    let dst = &mut dst_full[g * cin_g * h * w..(g + 1) * cin_g * h * w];
                    let target: &mut [f32] = if pointwise { dst } else { &mut dcol };
                    // SAFETY: dcol[kk x spatial] = W^T[kk x cout_g] * dY[cout_g x spatial].
                    unsafe {
                        matrixmultiply::sgemm(
                            kk,
                            cout_g,
                            spatial,
                            1.0,
                            wg.as_ptr(),
                            1,
                            kk as isize,
                            dyg.as_ptr(),
                            spatial as isize,
                            1,
                            0.0,
                            target.as_mut_ptr(),
                            spatial as isize,
                            1,
                        );
                    }
                    if !pointwise {
                        col2im(&dcol, cin_g, h, w, &shape, ho, wo, dst);
                    }
                }
            }
        }
        if let Some(bias) = self.bias.as_mut() {
            let bgrad = bias.grad_mut();
            for n in 0..grad.n() {
                for (c, plane) in grad.sample(n).chunks_exact(spatial).enumerate() {
                    bgrad[c] += plane.iter().sum::<f32>();
                }
            }
        }
        grad_in
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // i = o*stride + k - pad must lie in [0, input)
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    shape: &ConvShape,
    ho: usize,
    wo: usize,
    col: &mut [f32],
) {
    let (k, s, p) = (shape.kernel, shape.stride, shape.padding);
    let spatial = ho * wo;
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, p);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(wo, w, kx, s, p);
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * spatial..(row + 1) * spatial];
                dst[..oy_lo * wo].fill(0.0);
                dst[oy_hi * wo..].fill(0.0);
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let line = &plane[iy * w..(iy + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    out[..ox_lo].fill(0.0);
                    out[ox_hi..].fill(0.0);
                    if s == 1 {
                        let start = ox_lo + kx - p;
                        out[ox_lo..ox_hi].copy_from_slice(&line[start..start + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            out[ox] = line[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    shape: &ConvShape,
    ho: usize,
    wo: usize,
    dst: &mut [f32],
) {
    let (k, s, p) = (shape.kernel, shape.stride, shape.padding);
    let spatial = ho * wo;
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, p);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(wo, w, kx, s, p);
                let row = (c * k + ky) * k + kx;
                let src = &col[row * spatial..(row + 1) * spatial];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let line = &mut plane[iy * w..(iy + 1) * w];
                    let from = &src[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        let start = ox_lo + kx - p;
                        for (d, v) in line[start..start + ox_hi - ox_lo]
                            .iter_mut()
                            .zip(&from[ox_lo..ox_hi])
                        {
                            *d += v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            line[ox * s + kx - p] += from[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batch normalization over (N, H, W) per channel, with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    cache: Option<NormCache>,
}

parameterized!(BatchNorm2d {
    weight,
    bias,
    running_mean,
    running_var
});

#[derive(Clone, Debug)]
struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::filled(vec![channels], 1.0),
            bias: Param::filled(vec![channels], 0.0),
            running_mean: Param::buffer(vec![channels], 0.0),
            running_var: Param::buffer(vec![channels], 1.0),
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    /// Inference: normalizes with the running statistics.
    pub fn infer(&self, mut x: Tensor) -> Tensor {
        let channels = x.c();
        assert_eq!(channels, self.channels());
        for n in 0..x.n() {
                for c in 0..channels {
                let inv = 1.0 / (self.running_var.value[c] + NORM_EPS).sqrt();
                let scale = self.weight.value[c] * inv;
                let shift = self.bias.value[c] - self.running_mean.value[c] * scale;
                x.plane_mut(n, c)
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        x
    }

    /// Training: normalizes with batch statistics and updates the running averages.
    pub fn forward_train(&mut self, mut x: Tensor) -> Tensor {
        let channels = x.c();
        assert_eq!(channels, self.channels());
        let count = (x.n() * x.plane_len()) as f64;
        let mut inv_std = vec![0.0f32; channels];
        for c in 0..channels {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for n in 0..x.n() {
                for &v in x.plane(n, c) {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
            inv_std[c] = inv as f32;
            let m = self.momentum;
            let unbiased = if count > 1.0 {
                var * count / (count - 1.0)
            } else {
                var
            };
            self.running_mean.value[c] = (1.0 - m) * self.running_mean.value[c] + m * mean as f32;
            self.running_var.value[c] = (1.0 - m) * self.running_var.value[c] + m * unbiased as f32;
            let (mean, inv) = (mean as f32, inv as f32);
            for n in 0..x.n() {
                x.plane_mut(n, c)
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean) * inv);
            }
        }
        let xhat = x.clone();
        for n in 0..x.n() {
            for c in 0..channels {
                let (g, b) = (self.weight.value[c], self.bias.value[c]);
                x.plane_mut(n, c).iter_mut().for_each(|v| *v = *v * g + b);
            }
        }
        self.cache = Some(NormCache { xhat, inv_std });
        x
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let NormCache { xhat, inv_std } = self
            .cache
            .take()
            .expect("batch norm backward without training forward");
        let channels = grad.c();
        let count = (grad.n() * grad.plane_len()) as f32;
        let mut out = grad.clone();
        let gamma = self.weight.value.clone();
        let wg = self.weight.grad_mut();
        let mut sum_dy = vec![0.0f32; channels];
        let mut sum_dy_xhat = vec![0.0f32; channels];
        for c in 0..channels {
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            for n in 0..grad.n() {
                for (&dy, &xh) in grad.plane(n, c).iter().zip(xhat.plane(n, c)) {
                    s1 += dy as f64;
                    s2 += (dy * xh) as f64;
                }
            }
            sum_dy[c] = s1 as f32;
            sum_dy_xhat[c] = s2 as f32;
            wg[c] += s2 as f32;
        }
        let bgrad = self.bias.grad_mut();
        for c in 0..channels {
            bgrad[c] += sum_dy[c];
        }
        for c in 0..channels {
            let k = gamma[c] * inv_std[c] / count;
            for n in 0..grad.n() {
                for (o, &xh) in out.plane_mut(n, c).iter_mut().zip(xhat.plane(n, c)) {
                    *o = k * (count * *o - sum_dy[c] - xh * sum_dy_xhat[c]);
                }
            }
        }
        out
    }
}

/// Group normalization: statistics per (sample, channel group).
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<NormCache>,
}

parameterized!(GroupNorm { weight, bias });

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(groups >= 1 && channels.is_multiple_of(groups));
        Self {
            groups,
            weight: Param::filled(vec![channels], 1.0),
            bias: Param::filled(vec![channels], 0.0),
            cache: None,
        }
    }

    pub fn infer(&self, x: Tensor) -> Tensor {
        self.normalize(x).0
    }

    pub fn forward_train(&mut self, x: Tensor) -> Tensor {
        let (out, cache) = self.normalize_cached(x);
        self.cache = Some(cache);
        out
    }

    fn normalize(&self, x: Tensor) -> (Tensor, Vec<f32>) {
        let (mut x, inv_std) = self.standardize(x);
        self.affine(&mut x);
        (x, inv_std)
    }

    fn normalize_cached(&self, x: Tensor) -> (Tensor, NormCache) {
        let (mut x, inv_std) = self.standardize(x);
        let xhat = x.clone();
        self.affine(&mut x);
        (x, NormCache { xhat, inv_std })
    }

    fn affine(&self, x: &mut Tensor) {
        for n in 0..x.n() {
            for c in 0..x.c() {
                let (g, b) = (self.weight.value[c], self.bias.value[c]);
                x.plane_mut(n, c).iter_mut().for_each(|v| *v = *v * g + b);
            }
        }
    }

    fn standardize(&self, mut x: Tensor) -> (Tensor, Vec<f32>) {
        let channels = x.c();
        assert_eq!(channels, self.weight.len());
        let per = channels / self.groups;
        let group_len = per * x.plane_len();
        let mut inv_std = vec![0.0f32; x.n() * self.groups];
        for n in 0..x.n() {
            let sample = x.sample_mut(n);
            for (g, chunk) in sample.chunks_exact_mut(group_len).enumerate() {
                let (mut sum, mut sq) = (0.0f64, 0.0f64);
                for &v in chunk.iter() {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
                let mean = sum / group_len as f64;
                let var = (sq / group_len as f64 - mean * mean).max(0.0);
                let inv = (1.0 / (var + NORM_EPS as f64).sqrt()) as f32;
                inv_std[n * self.groups + g] = inv;
                let mean = mean as f32;
                chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
        }
        (x, inv_std)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let NormCache { xhat, inv_std } = self
            .cache
            .take()
            .expect("group norm backward without training forward");
        let channels = grad.c();
        let per = channels / self.groups;
        let plane = grad.plane_len();
        let group_len = (per * plane) as f32;
        {
            let wg = self.weight.grad_mut();
            for n in 0..grad.n() {
                for c in 0..channels {
                    wg[c] += grad
                        .plane(n, c)
                        .iter()
                        .zip(xhat.plane(n, c))
                        .map(|(a, b)| a * b)
                        .sum::<f32>();
                }
            }
        }
        {
            let bg = self.bias.grad_mut();
            for n in 0..grad.n() {
                for c in 0..channels {
                    bg[c] += grad.plane(n, c).iter().sum::<f32>();
                }
            }
        }
        let gamma = &self.weight.value;
        let mut out = Tensor::zeros(grad.n(), channels, grad.h(), grad.w());
        for n in 0..grad.n() {
            for g in 0..self.groups {
                // dxhat = dy * gamma
                let (mut s1, mut s2) = (0.0f64, 0.0f64);
                for c in g * per..(g + 1) * per {
                    for (&dy, &xh) in grad.plane(n, c).iter().zip(xhat.plane(n, c)) {
                        let d = dy * gamma[c];
                        s1 += d as f64;
                        s2 += (d * xh) as f64;
                    }
                }
                let (s1, s2) = (s1 as f32, s2 as f32);
                let k = inv_std[n * self.groups + g] / group_len;
                for c in g * per..(g + 1) * per {
                    let gm = gamma[c];
                    let src = grad.plane(n, c);
                    let xh = xhat.plane(n, c);
                    for (i, o) in out.plane_mut(n, c).iter_mut().enumerate() {
                        *o = k * (group_len * src[i] * gm - s1 - xh[i] * s2);
                    }
                }
            }
        }
        out
    }
}

/// Rectified linear unit; keeps the activation mask for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

pub fn relu(mut x: Tensor) -> Tensor {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

impl Relu {
    pub fn forward_train(&mut self, x: Tensor) -> Tensor {
        let x = relu(x);
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        x
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without training forward");
        for (g, keep) in grad.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        grad
    }
}

/// 3x3 stride-2 max pooling with padding 1.
#[derive(Clone, Debug, Default)]
pub struct MaxPool {
    cache: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool {
    pub fn out_size(size: usize) -> usize {
        (size + 2 - 3) / 2 + 1
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        Self::pool(x, false).0
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (out, argmax) = Self::pool(x, true);
        self.cache = Some((argmax, x.shape()));
        out
    }

    fn pool(x: &Tensor, train: bool) -> (Tensor, Vec<u32>) {
        let [n, c, h, w] = x.shape();
        let (ho, wo) = (Self::out_size(h), Self::out_size(w));
        let mut out = Tensor::zeros(n, c, ho, wo);
        let mut argmax = if train {
            vec![0u32; n * c * ho * wo]
        } else {
            Vec::new()
        };
        for b in 0..n {
            for ch in 0..c {
                let plane = x.plane(b, ch);
                let base = (b * c + ch) * ho * wo;
                let dst = out.plane_mut(b, ch);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
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
                                let idx = iy as usize * w + ix as usize;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        dst[oy * wo + ox] = best;
                        if train {
                            argmax[base + oy * wo + ox] = best_idx as u32;
                        }
                    }
                }
            }
        }
        (out, argmax)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (argmax, [n, c, h, w]) = self
            .cache
            .take()
            .expect("max pool backward without training forward");
        let mut out = Tensor::zeros(n, c, h, w);
        let plane_out = grad.plane_len();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane_out;
                let g = grad.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for i in 0..plane_out {
                    dst[argmax[base + i] as usize] += g[i];
                }
            }
        }
        out
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(n, c, ho, wo);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oy in 0..ho {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                let line = &mut dst[oy * wo..(oy + 1) * wo];
                for (ox, v) in line.iter_mut().enumerate() {
                    *v = row[ox / factor];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each `factor x factor` block.
pub fn upsample_nearest_backward(grad: &Tensor, factor: usize) -> Tensor {
    let [n, c, ho, wo] = grad.shape();
    let (h, w) = (ho / factor, wo / factor);
    let mut out = Tensor::zeros(n, c, h, w);
    for b in 0..n {
        for ch in 0..c {
            let src = grad.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oy in 0..ho {
                let line = &src[oy * wo..(oy + 1) * wo];
                let row = &mut dst[(oy / factor) * w..(oy / factor + 1) * w];
                for (ox, v) in line.iter().enumerate() {
                    row[ox / factor] += v;
                }
            }
        }
    }
    out
}

/// Source taps for half-pixel bilinear resampling along one axis.
#[derive(Clone, Debug)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f32>,
}

impl Taps {
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut taps = Taps {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push((src - lo as f64) as f32);
        }
        taps
    }
}

/// Bilinear resize of every plane (half-pixel centres, edge clamped).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let ty = Taps::new(h, out_h);
    let tx = Taps::new(w, out_w);
    let mut out = Tensor::zeros(n, c, out_h, out_w);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oy in 0..out_h {
                let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                let r0 = &src[y0 * w..(y0 + 1) * w];
                let r1 = &src[y1 * w..(y1 + 1) * w];
                for ox in 0..out_w {
                    let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    dst[oy * out_w + ox] = top + (bottom - top) * fy;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`] back to `h x w`.
pub fn resize_bilinear_backward(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, out_h, out_w] = grad.shape();
    let ty = Taps::new(h, out_h);
    let tx = Taps::new(w, out_w);
    let mut out = Tensor::zeros(n, c, h, w);
    for b in 0..n {
        for ch in 0..c {
            let src = grad.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oy in 0..out_h {
                let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let g = src[oy * out_w + ox];
                    let top = g * (1.0 - fy);
                    let bottom = g * fy;
                    dst[y0 * w + x0] += top * (1.0 - fx);
                    dst[y0 * w + x1] += top * fx;
                    dst[y1 * w + x0] += bottom * (1.0 - fx);
                    dst[y1 * w + x1] += bottom * fx;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor, conv: &Conv2d) -> Tensor {
        let s = conv.shape();
        let (ho, wo) = (s.out_size(x.h()), s.out_size(x.w()));
        let mut out = Tensor::zeros(x.n(), s.out_channels, ho, wo);
        let cin_g = s.in_channels / s.groups;
        let cout_g = s.out_channels / s.groups;
        let k = s.kernel;
        for n in 0..x.n() {
            for co in 0..s.out_channels {
                let g = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[co]) as f64;
                        for ci in 0..cin_g {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                                    let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((co * cin_g + ci) * k + ky) * k + kx];
                                    acc += (wv * x.at(n, g * cin_g + ci, iy as usize, ix as usize)) as f64;
                                }
                            }
                        }
                        out.plane_mut(n, co)[oy * wo + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for shape in [
            ConvShape::new(4, 6, 3),
            ConvShape::new(4, 6, 3).stride(2),
            ConvShape::new(3, 8, 7).stride(2).padding(3),
            ConvShape::new(8, 8, 3).groups(4).bias(true),
            ConvShape::new(6, 4, 1).bias(true),
            ConvShape::new(6, 4, 1).stride(2).padding(0),
        ] {
            let conv = Conv2d::new(shape, &mut rng);
            let x = random_tensor([2, shape.in_channels, 9, 11], 2);
            let fast = conv.infer(&x);
            let slow = naive_conv(&x, &conv);
            assert_eq!(fast.shape(), slow.shape());
            assert!(max_abs_diff(fast.data(), slow.data()) < 1e-5, "{shape:?}");
        }
    }

    /// Scalar objective sum(out * probe) for finite-difference checks.
    fn objective(out: &Tensor, probe: &Tensor) -> f64 {
        out.data().iter().zip(probe.data()).map(|(a, b)| (a * b) as f64).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for shape in [
            ConvShape::new(4, 6, 3).stride(2).groups(2).bias(true),
            ConvShape::new(3, 5, 1).bias(true),
        ] {
            let mut conv = Conv2d::new(shape, &mut rng);
            let x = random_tensor([2, shape.in_channels, 6, 7], 4);
            let out = conv.forward_train(x.clone());
            let probe = random_tensor(out.shape(), 5);
            let gx = conv.backward(&probe).unwrap();
            let h = 1e-2f32;
            for idx in [0usize, 7, 33, x.data().len() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= h;
                let fd = (objective(&conv.infer(&xp), &probe) - objective(&conv.infer(&xm), &probe))
                    / (2.0 * h as f64);
                assert!((fd - gx.data()[idx] as f64).abs() < 1e-3, "input grad {idx}");
            }
            for idx in [0usize, 5, conv.weight.len() - 1] {
                let analytic = conv.weight.grad[idx] as f64;
                let mut cp = conv.clone();
                cp.weight.value[idx] += h;
                let mut cm = conv.clone();
                cm.weight.value[idx] -= h;
                let fd = (objective(&cp.infer(&x), &probe) - objective(&cm.infer(&x), &probe))
                    / (2.0 * h as f64);
                assert!((fd - analytic).abs() < 1e-3, "weight grad {idx}: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn norms_gradients_match_finite_differences() {
        let x = random_tensor([2, 4, 3, 3], 7);
        let probe = random_tensor([2, 4, 3, 3], 8);
        let h = 1e-2f32;

        let mut gn = GroupNorm::new(2, 4);
        gn.weight.value = vec![0.5, 1.5, -1.0, 2.0];
        let _ = gn.forward_train(x.clone());
        let gx = gn.backward(&probe);
        for idx in [0usize, 9, 40, 71] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fp = objective(&gn.infer(xp), &probe);
            let fm = objective(&gn.infer(xm), &probe);
            let fd = (fp - fm) / (2.0 * h as f64);
            assert!((fd - gx.data()[idx] as f64).abs() < 2e-3, "gn {idx}: {fd} vs {}", gx.data()[idx]);
        }

        let mut bn = BatchNorm2d::new(4);
        bn.weight.value = vec![0.5, 1.5, -1.0, 2.0];
        let _ = bn.forward_train(x.clone());
        let gx = bn.backward(&probe);
        for idx in [0usize, 9, 40, 71] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fp = objective(&bn.clone().forward_train(xp), &probe);
            let fm = objective(&bn.clone().forward_train(xm), &probe);
            let fd = (fp - fm) / (2.0 * h as f64);
            assert!((fd - gx.data()[idx] as f64).abs() < 2e-3, "bn {idx}: {fd} vs {}", gx.data()[idx]);
        }
    }

    #[test]
    fn maxpool_and_resamplers_are_adjoint() {
        // <A x, y> == <x, A^T y> for the linear resamplers.
        let x = random_tensor([1, 2, 7, 7], 11);
        let up = upsample_nearest(&x, 2);
        let y = random_tensor(up.shape(), 12);
        let lhs = objective(&up, &y);
        let rhs = objective(&x, &upsample_nearest_backward(&y, 2));
        assert!((lhs - rhs).abs() < 1e-4);

        let up = resize_bilinear(&x, 28, 28);
        let y = random_tensor(up.shape(), 13);
        let lhs = objective(&up, &y);
        let rhs = objective(&x, &resize_bilinear_backward(&y, 7, 7));
        assert!((lhs - rhs).abs() < 1e-4);

        let mut pool = MaxPool::default();
        let out = pool.forward_train(&x);
        assert_eq!(out.shape(), [1, 2, 4, 4]);
        let g = random_tensor(out.shape(), 14);
        let gx = pool.backward(&g);
        assert!((gx.data().iter().sum::<f32>() - g.data().iter().sum::<f32>()).abs() < 1e-4);
    }

    #[test]
    fn bilinear_resize_of_constant_is_constant() {
        let x = Tensor::from_vec([1, 1, 3, 5], vec![2.5; 15]).unwrap();
        let y = resize_bilinear(&x, 12, 20);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }
}

use rand::Rng;

use super::{gemm, he_normal, join, FeatureMap, Parameterized};
use crate::tensor::Tensor;

/// 2-D convolution with square kernels, zero padding and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
pub struct ConvCache {
    cols: Vec<f32>,
    in_dims: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init_scale: f32,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: he_normal(rng, vec![out_channels, in_channels, kernel, kernel], fan_in, init_scale),
            bias: Tensor::zeros(vec![out_channels]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (height + 2 * self.padding - k) / self.stride + 1,
            (width + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &FeatureMap, oh: usize, ow: usize) -> Vec<f32> {
        let (c, n, h, w) = x.dims();
        let (k, s, p) = (self.kernel(), self.stride, self.padding);
        if k == 1 && s == 1 && p == 0 {
            return x.data.clone();
        }
        let ncols = n * oh * ow;
        let mut cols = vec![0.0f32; c * k * k * ncols];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ncols;
                    let (ox_lo, ox_hi) = valid_range(ow, w, s, kx, p);
                    for b in 0..n {
                        let plane = (ci * n + b) * h * w;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = row + (b * oh + oy) * ow;
                            let src = plane + iy as usize * w;
                            if s == 1 {
                                let ix0 = ox_lo + kx - p;
                                cols[dst + ox_lo..dst + ox_hi]
                                    .copy_from_slice(&x.data[src + ix0..src + ix0 + (ox_hi - ox_lo)]);
                            } else {
                                for ox in ox_lo..ox_hi {
                                    cols[dst + ox] = x.data[src + ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], dims: (usize, usize, usize, usize), oh: usize, ow: usize) -> FeatureMap {
        let (c, n, h, w) = dims;
        let (k, s, p) = (self.kernel(), self.stride, self.padding);
        if k == 1 && s == 1 && p == 0 {
            return FeatureMap {
                channels: c,
                batch: n,
                height: h,
                width: w,
                data: cols.to_vec(),
            };
        }
        let mut dx = FeatureMap::zeros(c, n, h, w);
        let ncols = n * oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ncols;
                    let (ox_lo, ox_hi) = valid_range(ow, w, s, kx, p);
                    for b in 0..n {
                        let plane = (ci * n + b) * h * w;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = row + (b * oh + oy) * ow;
                            let dst = plane + iy as usize * w;
                            for ox in ox_lo..ox_hi {
                                dx.data[dst + ox * s + kx - p] += cols[src + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, ConvCache) {
        debug_assert_eq!(x.channels, self.in_channels());
        let (oh, ow) = self.output_size(x.height, x.width);
        let cols = self.im2col(x, oh, ow);
        let cout = self.out_channels();
        let kdim = self.in_channels() * self.kernel() * self.kernel();
        let ncols = x.batch * oh * ow;
        let mut y = FeatureMap::zeros(cout, x.batch, oh, ow);
        for (co, plane) in y.data.chunks_exact_mut(ncols).enumerate() {
            plane.fill(self.bias.data()[co]);
        }
        gemm(cout, kdim, ncols, self.weight.data(), false, &cols, false, &mut y.data, 1.0);
        (
            y,
            ConvCache {
                cols,
                in_dims: x.dims(),
            },
        )
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        cache: ConvCache,
        dy: &FeatureMap,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let cout = self.out_channels();
        let kdim = self.in_channels() * self.kernel() * self.kernel();
        let ncols = dy.plane();
        for (co, plane) in dy.data.chunks_exact(ncols).enumerate() {
            grad.bias.data_mut()[co] += plane.iter().sum::<f32>();
        }
        gemm(cout, ncols, kdim, &dy.data, false, &cache.cols, true, grad.weight.data_mut(), 1.0);
        if !need_input_grad {
            return None;
        }
        let mut dcols = cache.cols;
        gemm(kdim, cout, ncols, self.weight.data(), true, &dy.data, false, &mut dcols, 0.0);
        Some(self.col2im(&dcols, cache.in_dims, dy.height, dy.width))
    }
}

/// Output columns `ox` whose input column `ox*s + kx - p` lies in `[0, w)`.
fn valid_range(ow: usize, w: usize, s: usize, kx: usize, p: usize) -> (usize, usize) {
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // largest ox with ox*s + kx - p <= w - 1
    let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

impl Parameterized for Conv2d {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Transposed convolution with a 2×2 kernel and stride 2 (exact 2× upsampling).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2x2 {
    /// `[out, 2, 2, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvTranspose2x2 {
    pub fn new<R: Rng>(rng: &mut R, in_channels: usize, out_channels: usize) -> Self {
        Self {
            weight: he_normal(rng, vec![out_channels, 2, 2, in_channels], in_channels, 1.0),
            bias: Tensor::zeros(vec![out_channels]),
        }
    }

    fn channels(&self) -> (usize, usize) {
        (self.weight.shape()[3], self.weight.shape()[0])
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, FeatureMap) {
        let (cin, cout) = self.channels();
        debug_assert_eq!(x.channels, cin);
        let (n, h, w) = (x.batch, x.height, x.width);
        let plane = x.plane();
        let mut expanded = vec![0.0f32; cout * 4 * plane];
        gemm(cout * 4, cin, plane, self.weight.data(), false, &x.data, false, &mut expanded, 0.0);
        let mut y = FeatureMap::zeros(cout, n, 2 * h, 2 * w);
        for co in 0..cout {
            let bias = self.bias.data()[co];
            for tap in 0..4 {
                let (dy, dx) = (tap / 2, tap % 2);
                let src = &expanded[(co * 4 + tap) * plane..(co * 4 + tap + 1) * plane];
                for b in 0..n {
                    for r in 0..h {
                        let dst = ((co * n + b) * 2 * h + 2 * r + dy) * 2 * w + dx;
                        let s = (b * h + r) * w;
                        for c in 0..w {
                            y.data[dst + 2 * c] = src[s + c] + bias;
                        }
                    }
                }
            }
        }
        (y, x.clone())
    }

    pub fn backward(&self, input: FeatureMap, dy: &FeatureMap, grad: &mut ConvTranspose2x2) -> FeatureMap {
        let (cin, cout) = self.channels();
        let (n, h, w) = (input.batch, input.height, input.width);
        let plane = input.plane();
        let mut gathered = vec![0.0f32; cout * 4 * plane];
        for co in 0..cout {
            let mut bias_sum = 0.0f32;
            for tap in 0..4 {
                let (ty, tx) = (tap / 2, tap % 2);
                let dst = &mut gathered[(co * 4 + tap) * plane..(co * 4 + tap + 1) * plane];
                for b in 0..n {
                    for r in 0..h {
                        let src = ((co * n + b) * 2 * h + 2 * r + ty) * 2 * w + tx;
                        let d = (b * h + r) * w;
                        for c in 0..w {
                            let v = dy.data[src + 2 * c];
                            dst[d + c] = v;
                            bias_sum += v;
                        }
                    }
                }
            }
            grad.bias.data_mut()[co] += bias_sum;
        }
        gemm(cout * 4, plane, cin, &gathered, false, &input.data, true, grad.weight.data_mut(), 1.0);
        let mut dx = FeatureMap::zeros(cin, n, h, w);
        gemm(cin, cout * 4, plane, self.weight.data(), true, &gathered, false, &mut dx.data, 0.0);
        dx
    }
}

impl Parameterized for ConvTranspose2x2 {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Fully connected layer over row-major `[batch, in]` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        // Kaiming-uniform-like scale without the ReLU gain.
        Self {
            weight: he_normal(rng, vec![outputs, inputs], inputs, std::f32::consts::FRAC_1_SQRT_2),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let (i, o) = (self.inputs(), self.outputs());
        let mut y = Vec::with_capacity(batch * o);
        for _ in 0..batch {
            y.extend_from_slice(self.bias.data());
        }
        gemm(batch, i, o, x, false, self.weight.data(), true, &mut y, 1.0);
        y
    }

    pub fn backward(&self, x: &[f32], dy: &[f32], batch: usize, grad: &mut Linear) -> Vec<f32> {
        let (i, o) = (self.inputs(), self.outputs());
        for row in dy.chunks_exact(o) {
            for (g, d) in grad.bias.data_mut().iter_mut().zip(row) {
                *g += d;
            }
        }
        gemm(o, batch, i, dy, true, x, false, grad.weight.data_mut(), 1.0);
        let mut dx = vec![0.0; batch * i];
        gemm(batch, o, i, dy, false, self.weight.data(), false, &mut dx, 0.0);
        dx
    }
}

impl Parameterized for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

pub fn relu_inplace(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` by the positivity of the ReLU output.
pub fn relu_backward(output: &FeatureMap, dy: &mut FeatureMap) {
    for (d, &o) in dy.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Max pooling with implicit `-inf` padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
pub struct MaxPoolCache {
    argmax: Vec<u32>,
    in_dims: (usize, usize, usize, usize),
}

impl MaxPool {
    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, MaxPoolCache) {
        let (c, n, h, w) = x.dims();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut y = FeatureMap::zeros(c, n, oh, ow);
        let mut argmax = vec![0u32; y.data.len()];
        for cb in 0..c * n {
            let base = cb * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (cb * oh + oy) * ow + ox;
                    y.data[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        (
            y,
            MaxPoolCache {
                argmax,
                in_dims: x.dims(),
            },
        )
    }

    pub fn backward(&self, cache: MaxPoolCache, dy: &FeatureMap) -> FeatureMap {
        let (c, n, h, w) = cache.in_dims;
        let mut dx = FeatureMap::zeros(c, n, h, w);
        for (&idx, &g) in cache.argmax.iter().zip(&dy.data) {
            dx.data[idx as usize] += g;
        }
        dx
    }
}

/// Spatial mean per channel; returns row-major `[batch, channels]`.
pub fn global_avg_pool(x: &FeatureMap) -> Vec<f32> {
    let (c, n, h, w) = x.dims();
    let hw = h * w;
    let mut out = vec![0.0; n * c];
    for ci in 0..c {
        for b in 0..n {
            let start = (ci * n + b) * hw;
            out[b * c + ci] = x.data[start..start + hw].iter().sum::<f32>() / hw as f32;
        }
    }
    out
}

pub fn global_avg_pool_backward(dy: &[f32], dims: (usize, usize, usize, usize)) -> FeatureMap {
    let (c, n, h, w) = dims;
    let hw = h * w;
    let mut dx = FeatureMap::zeros(c, n, h, w);
    for ci in 0..c {
        for b in 0..n {
            let g = dy[b * c + ci] / hw as f32;
            let start = (ci * n + b) * hw;
            dx.data[start..start + hw].fill(g);
        }
    }
    dx
}

//! A small CPU neural-network engine: convolution, pooling and linear layers
//! with hand-written backward passes, plus Adam.
//!
//! Activations are stored channel-major (`[C, N, H, W]`), so a convolution is a
//! single GEMM over the whole batch and channel concatenation is a plain
//! buffer append.

mod adam;
mod layers;

pub use adam::{Adam, AdamState, StepSchedule, TrainSchedule};
pub use layers::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, Conv2d, ConvCache,
    ConvTranspose2x2, Linear, MaxPool, MaxPoolCache,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::tensor::Tensor;

/// Batch of feature maps, laid out `[channels][batch][height][width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    /// Stacks per-sample `[C, H, W]` buffers into one channel-major batch.
    pub fn from_samples(samples: &[&[f32]], channels: usize, height: usize, width: usize) -> Self {
        let hw = height * width;
        let batch = samples.len();
        let mut out = Self::zeros(channels, batch, height, width);
        for (b, sample) in samples.iter().enumerate() {
            debug_assert_eq!(sample.len(), channels * hw);
            for c in 0..channels {
                let dst = (c * batch + b) * hw;
                out.data[dst..dst + hw].copy_from_slice(&sample[c * hw..(c + 1) * hw]);
            }
        }
        out
    }

    /// Extracts sample `b` as a `[C, H, W]` buffer.
    pub fn sample(&self, b: usize) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(self.channels * hw);
        for c in 0..self.channels {
            let src = (c * self.batch + b) * hw;
            out.extend_from_slice(&self.data[src..src + hw]);
        }
        out
    }

    pub fn plane(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.batch, self.height, self.width)
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat_channels(mut self, other: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(
            (self.batch, self.height, self.width),
            (other.batch, other.height, other.width)
        );
        self.channels += other.channels;
        self.data.extend_from_slice(&other.data);
        self
    }

    /// Inverse of [`FeatureMap::concat_channels`]: splits off the first `first` channels.
    pub fn split_channels(mut self, first: usize) -> (FeatureMap, FeatureMap) {
        let rest = self.data.split_off(first * self.plane());
        let tail = FeatureMap {
            channels: self.channels - first,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: rest,
        };
        self.channels = first;
        (self, tail)
    }
}

/// `c = a·b + beta·c`, where `a` is logically `m×k` and `b` is `k×n`, each
/// optionally stored transposed. All buffers are row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index reached through the
    // given strides lies inside the three slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// He-normal initialization `N(0, scale² · 2 / fan_in)`.
pub(crate) fn he_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize, scale: f32) -> Tensor {
    let std = scale * (2.0 / fan_in as f32).sqrt();
    let normal = Normal::new(0.0f32, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

/// Uniform access to every trainable tensor of a model, in a fixed order.
///
/// Gradients are stored in a structure of the same type as the model (see
/// [`Parameterized::zeros_like`]), so parameters and gradients zip up by
/// position.
pub trait Parameterized {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut out = self.clone();
        for (_, t) in out.named_params_mut() {
            t.fill(0.0);
        }
        out
    }

    /// `self += other` over all parameters.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for ((_, a), (_, b)) in self.named_params_mut().into_iter().zip(other.named_params()) {
            a.add_scaled(b, 1.0);
        }
    }
}

/// Splits `items` into fixed-size chunks, computes each chunk's gradient into
/// a fresh zeroed copy of `model`, and sums the chunk results in order.
///
/// The chunk layout does not depend on the thread count, so parallel and
/// sequential runs produce bit-identical sums.
pub fn chunked_gradients<M, T, S, F>(
    model: &M,
    items: &[T],
    chunk_size: usize,
    sequential: bool,
    f: F,
) -> (M, S)
where
    M: Parameterized + Clone + Send + Sync,
    T: Sync,
    S: Default + std::ops::AddAssign + Send,
    F: Fn(&[T], &mut M) -> S + Sync,
{
    let run = |chunk: &[T]| {
        let mut grads = model.zeros_like();
        let summary = f(chunk, &mut grads);
        (grads, summary)
    };
    let parts: Vec<(M, S)> = if sequential {
        items.chunks(chunk_size.max(1)).map(run).collect()
    } else {
        items.par_chunks(chunk_size.max(1)).map(run).collect()
    };
    let mut iter = parts.into_iter();
    let (mut total, mut summary) = iter.next().unwrap_or_else(|| (model.zeros_like(), S::default()));
    for (g, s) in iter {
        total.accumulate(&g);
        summary += s;
    }
    (total, summary)
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        let a_t = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b_t = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [1.0; 4];
        gemm(2, 3, 2, &a_t, true, &b_t, true, &mut c2, 1.0);
        assert_eq!(c2, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn sample_layout_round_trip() {
        let s0: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let s1: Vec<f32> = (8..16).map(|v| v as f32).collect();
        let fm = FeatureMap::from_samples(&[&s0, &s1], 2, 2, 2);
        assert_eq!(&fm.data[..4], &s0[..4]);
        assert_eq!(&fm.data[4..8], &s1[..4]);
        assert_eq!(fm.sample(1), s1);
        let (a, b) = fm.clone().split_channels(1);
        assert_eq!(a.concat_channels(&b), fm);
    }
}

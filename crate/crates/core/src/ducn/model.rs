use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::input::InputStack;
use super::loss::{l2_normalize, softmax, ClassifierView};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join, relu_backward, relu_inplace, Conv2d, ConvCache, FeatureMap,
    Linear, MaxPool, MaxPoolCache, Parameterized,
};
use crate::rng::{stream_rng, stream_seed, streams};
use crate::tensor::Tensor;

/// Channel widths of the four residual stages of a full-width ResNet-18.
const FULL_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const BLOCKS_PER_STAGE: usize = 2;
/// Residual blocks on one input-to-embedding path (trunk plus one head).
const BLOCKS_PER_PATH: usize = 4 * BLOCKS_PER_STAGE;
/// Total spatial downsampling from input to the last stage.
const DOWNSAMPLE: usize = 32;
/// Stacks per forward batch when embedding many slices.
const EVAL_BATCH: usize = 16;

const STEM_POOL: MaxPool = MaxPool {
    kernel: 3,
    stride: 2,
    padding: 1,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DuCNConfig {
    /// Multiplier on the ResNet-18 stage widths (64, 128, 256, 512).
    pub width_factor: f64,
    pub embedding_dim: usize,
    pub image_size: usize,
    pub in_channels: usize,
}

impl Default for DuCNConfig {
    fn default() -> Self {
        Self {
            width_factor: 0.25,
            embedding_dim: 128,
            image_size: 64,
            in_channels: 3,
        }
    }
}

impl DuCNConfig {
    pub fn validate(&self) -> Result<()> {
        let scaled = FULL_WIDTHS[0] as f64 * self.width_factor;
        if !(scaled >= 1.0 && scaled.fract() == 0.0) {
            return Err(Error::Config(format!(
                "width factor {} must give a whole number of stem channels",
                self.width_factor
            )));
        }
        if self.image_size < DOWNSAMPLE || self.image_size % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {DOWNSAMPLE}",
                self.image_size
            )));
        }
        if self.embedding_dim == 0 || self.in_channels == 0 {
            return Err(Error::Config("embedding_dim and in_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> [usize; 4] {
        FULL_WIDTHS.map(|w| (w as f64 * self.width_factor).round() as usize)
    }
}

/// How the network's parameters are initialized.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Fresh random weights; the "untrained backbone" of the UP ablation.
    SeededRandom,
    /// Stand-in for pretrained weights: parameters are loaded from `path`
    /// when given, otherwise drawn from a separate seed stream.
    #[default]
    PretrainedStub,
    PretrainedFrom { path: PathBuf },
}

/// Two 3×3 convolutions with an identity or 1×1 projection shortcut.
///
/// There is no normalization layer. The second convolution starts at zero
/// and the first is scaled down with the path depth, so every block starts
/// as (nearly) the identity and deep stacks train without batch statistics.
#[derive(Clone, Debug, PartialEq)]
struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

struct BlockCache {
    c1: ConvCache,
    h: FeatureMap,
    c2: ConvCache,
    sc: Option<ConvCache>,
    out: FeatureMap,
}

impl BasicBlock {
    fn new<R: rand::Rng>(rng: &mut R, cin: usize, cout: usize, stride: usize) -> Self {
        let scale = (BLOCKS_PER_PATH as f32).powf(-0.5);
        let conv1 = Conv2d::new(rng, cin, cout, 3, stride, 1, scale);
        let mut conv2 = Conv2d::new(rng, cout, cout, 3, 1, 1, 1.0);
        conv2.weight.fill(0.0);
        let shortcut = (stride != 1 || cin != cout).then(|| Conv2d::new(rng, cin, cout, 1, stride, 0, 0.5));
        Self { conv1, conv2, shortcut }
    }

    fn forward(&self, x: &FeatureMap) -> (FeatureMap, BlockCache) {
        let (mut h, c1) = self.conv1.forward(x);
        relu_inplace(&mut h);
        let (mut y, c2) = self.conv2.forward(&h);
        let sc = match &self.shortcut {
            Some(conv) => {
                let (s, cache) = conv.forward(x);
                y.add_assign(&s);
                Some(cache)
            }
            None => {
                y.add_assign(x);
                None
            }
        };
        relu_inplace(&mut y);
        let cache = BlockCache {
            c1,
            h,
            c2,
            sc,
            out: y.clone(),
        };
        (y, cache)
    }

    fn backward(&self, cache: BlockCache, mut dy: FeatureMap, grad: &mut BasicBlock) -> FeatureMap {
        relu_backward(&cache.out, &mut dy);
        let mut dh = self
            .conv2
            .backward(cache.c2, &dy, &mut grad.conv2, true)
            .expect("input grad requested");
        relu_backward(&cache.h, &mut dh);
        let mut dx = self
            .conv1
            .backward(cache.c1, &dh, &mut grad.conv1, true)
            .expect("input grad requested");
        match (&self.shortcut, cache.sc) {
            (Some(conv), Some(sc)) => {
                let g = grad.shortcut.as_mut().expect("gradient mirrors model");
                dx.add_assign(&conv.backward(sc, &dy, g, true).expect("input grad requested"));
            }
            _ => dx.add_assign(&dy),
        }
        dx
    }

    fn conv_params(&self) -> usize {
        self.conv1.weight.len() + self.conv2.weight.len() + self.shortcut.as_ref().map_or(0, |c| c.weight.len())
    }
}

impl Parameterized for BasicBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv1.collect(&join(prefix, "conv1"), out);
        self.conv2.collect(&join(prefix, "conv2"), out);
        if let Some(s) = &self.shortcut {
            s.collect(&join(prefix, "shortcut"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv1.collect_mut(&join(prefix, "conv1"), out);
        self.conv2.collect_mut(&join(prefix, "conv2"), out);
        if let Some(s) = &mut self.shortcut {
            s.collect_mut(&join(prefix, "shortcut"), out);
        }
    }
}

fn build_stage<R: rand::Rng>(rng: &mut R, cin: usize, cout: usize, stride: usize) -> Vec<BasicBlock> {
    (0..BLOCKS_PER_STAGE)
        .map(|i| {
            if i == 0 {
                BasicBlock::new(rng, cin, cout, stride)
            } else {
                BasicBlock::new(rng, cout, cout, 1)
            }
        })
        .collect()
}

fn blocks_forward(blocks: &[BasicBlock], x: FeatureMap, caches: &mut Vec<BlockCache>) -> FeatureMap {
    let mut cur = x;
    for b in blocks {
        let (y, c) = b.forward(&cur);
        caches.push(c);
        cur = y;
    }
    cur
}

fn blocks_backward(
    blocks: &[BasicBlock],
    caches: Vec<BlockCache>,
    dy: FeatureMap,
    grads: &mut [BasicBlock],
) -> FeatureMap {
    let mut d = dy;
    for ((b, c), g) in blocks.iter().zip(caches).zip(grads.iter_mut()).rev() {
        d = b.backward(c, d, g);
    }
    d
}

fn collect_blocks<'a>(blocks: &'a [BasicBlock], prefix: &str, layer: &str, out: &mut Vec<(String, &'a Tensor)>) {
    for (i, b) in blocks.iter().enumerate() {
        b.collect(&join(prefix, &format!("{layer}.{i}")), out);
    }
}

fn collect_blocks_mut<'a>(
    blocks: &'a mut [BasicBlock],
    prefix: &str,
    layer: &str,
    out: &mut Vec<(String, &'a mut Tensor)>,
) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b.collect_mut(&join(prefix, &format!("{layer}.{i}")), out);
    }
}

/// Shared shallow feature extractor: stem convolution, max pool and the
/// first two residual stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    stem: Conv2d,
    /// `layer1` then `layer2`, two blocks each.
    blocks: Vec<BasicBlock>,
}

struct TrunkCache {
    stem: ConvCache,
    stem_out: FeatureMap,
    pool: MaxPoolCache,
    blocks: Vec<BlockCache>,
}

impl Trunk {
    fn new<R: rand::Rng>(rng: &mut R, config: &DuCNConfig) -> Self {
        let w = config.widths();
        let stem = Conv2d::new(rng, config.in_channels, w[0], 7, 2, 3, 1.0);
        let mut blocks = build_stage(rng, w[0], w[0], 1);
        blocks.extend(build_stage(rng, w[0], w[1], 2));
        Self { stem, blocks }
    }

    fn forward(&self, x: &FeatureMap) -> (FeatureMap, TrunkCache) {
        let (mut s, stem) = self.stem.forward(x);
        relu_inplace(&mut s);
        let (pooled, pool) = STEM_POOL.forward(&s);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let y = blocks_forward(&self.blocks, pooled, &mut blocks);
        (
            y,
            TrunkCache {
                stem,
                stem_out: s,
                pool,
                blocks,
            },
        )
    }

    fn backward(&self, cache: TrunkCache, dy: FeatureMap, grad: &mut Trunk) {
        let d = blocks_backward(&self.blocks, cache.blocks, dy, &mut grad.blocks);
        let mut d = STEM_POOL.backward(cache.pool, &d);
        relu_backward(&cache.stem_out, &mut d);
        self.stem.backward(cache.stem, &d, &mut grad.stem, false);
    }
}

impl Parameterized for Trunk {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.stem.collect(&join(prefix, "stem"), out);
        collect_blocks(&self.blocks[..BLOCKS_PER_STAGE], prefix, "layer1", out);
        collect_blocks(&self.blocks[BLOCKS_PER_STAGE..], prefix, "layer2", out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.stem.collect_mut(&join(prefix, "stem"), out);
        let (l1, l2) = self.blocks.split_at_mut(BLOCKS_PER_STAGE);
        collect_blocks_mut(l1, prefix, "layer1", out);
        collect_blocks_mut(l2, prefix, "layer2", out);
    }
}

/// Task-specific deep stages, global average pool and embedding projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `layer3` then `layer4`, two blocks each.
    blocks: Vec<BasicBlock>,
    fc: Linear,
}

struct HeadCache {
    blocks: Vec<BlockCache>,
    pooled: Vec<f32>,
    dims: (usize, usize, usize, usize),
}

impl Head {
    fn new<R: rand::Rng>(rng: &mut R, config: &DuCNConfig) -> Self {
        let w = config.widths();
        let mut blocks = build_stage(rng, w[1], w[2], 2);
        blocks.extend(build_stage(rng, w[2], w[3], 2));
        Self {
            blocks,
            fc: Linear::new(rng, w[3], config.embedding_dim),
        }
    }

    fn forward(&self, x: FeatureMap) -> (Vec<f32>, HeadCache) {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let y = blocks_forward(&self.blocks, x, &mut blocks);
        let pooled = global_avg_pool(&y);
        let z = self.fc.forward(&pooled, y.batch);
        (
            z,
            HeadCache {
                blocks,
                pooled,
                dims: y.dims(),
            },
        )
    }

    fn backward(&self, cache: HeadCache, dz: &[f32], grad: &mut Head) -> FeatureMap {
        let batch = cache.dims.1;
        let dpooled = self.fc.backward(&cache.pooled, dz, batch, &mut grad.fc);
        let dy = global_avg_pool_backward(&dpooled, cache.dims);
        blocks_backward(&self.blocks, cache.blocks, dy, &mut grad.blocks)
    }
}

impl Parameterized for Head {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        collect_blocks(&self.blocks[..BLOCKS_PER_STAGE], prefix, "layer3", out);
        collect_blocks(&self.blocks[BLOCKS_PER_STAGE..], prefix, "layer4", out);
        self.fc.collect(&join(prefix, "fc"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        let (l3, l4) = self.blocks.split_at_mut(BLOCKS_PER_STAGE);
        collect_blocks_mut(l3, prefix, "layer3", out);
        collect_blocks_mut(l4, prefix, "layer4", out);
        self.fc.collect_mut(&join(prefix, "fc"), out);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Detection,
    Recommendation,
}

/// Shared trunk with a detection head (plus 2-way classifier) and an
/// independent recommendation head.
#[derive(Clone, Debug, PartialEq)]
pub struct DuCNModel {
    config: DuCNConfig,
    pub trunk: Trunk,
    pub detection: Head,
    pub recommendation: Head,
    /// `embedding_dim → 2` logits over (non-NCP, NCP).
    pub classifier: Linear,
}

/// Cached activations of one trunk + head pass.
pub(crate) struct PathCache {
    trunk: TrunkCache,
    head: HeadCache,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    pub embedding: Vec<f32>,
    pub logits: [f32; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_ncp: f32,
    pub positive: bool,
}

impl Prediction {
    /// Softmax probability of the NCP class; ties at 0.5 count as positive.
    pub fn from_logits(logits: [f32; 2]) -> Self {
        let p = softmax(&logits.map(f64::from))[1] as f32;
        Self {
            p_ncp: p,
            positive: p >= 0.5,
        }
    }
}

pub fn build_ducn(config: &DuCNConfig, init: &Init, seed: u64) -> Result<DuCNModel> {
    config.validate()?;
    let base = match init {
        Init::SeededRandom => seed,
        Init::PretrainedStub | Init::PretrainedFrom { .. } => stream_seed(seed, streams::PRETRAINED_STUB),
    };
    let mut model = DuCNModel {
        config: config.clone(),
        trunk: Trunk::new(&mut stream_rng(base, streams::TRUNK_INIT), config),
        detection: Head::new(&mut stream_rng(base, streams::DETECTION_HEAD_INIT), config),
        recommendation: Head::new(&mut stream_rng(base, streams::RECOMMEND_HEAD_INIT), config),
        classifier: Linear::new(
            &mut stream_rng(base, streams::CLASSIFIER_INIT),
            config.embedding_dim,
            2,
        ),
    };
    if let Init::PretrainedFrom { path } = init {
        checkpoint::load_params(path, "params", &mut model)?;
    }
    Ok(model)
}

/// Convolution weights of a ResNet-18 path (stem, four stages, 1×1
/// projections) at the given width factor, without the final linear layer.
pub fn resnet18_conv_params(width_factor: f64, in_channels: usize) -> usize {
    let w = FULL_WIDTHS.map(|c| (c as f64 * width_factor).round() as usize);
    let mut total = in_channels * w[0] * 49;
    let mut cin = w[0];
    for &cout in &w {
        total += cin * cout * 9 + cout * cout * 9;
        total += 2 * cout * cout * 9;
        if cin != cout {
            total += cin * cout;
        }
        cin = cout;
    }
    total
}

impl DuCNModel {
    pub fn config(&self) -> &DuCNConfig {
        &self.config
    }

    fn head(&self, kind: HeadKind) -> &Head {
        match kind {
            HeadKind::Detection => &self.detection,
            HeadKind::Recommendation => &self.recommendation,
        }
    }

    /// Convolution weights on one input-to-embedding path (trunk plus one head).
    pub fn path_conv_params(&self) -> usize {
        self.trunk.stem.weight.len()
            + self
                .trunk
                .blocks
                .iter()
                .chain(&self.detection.blocks)
                .map(BasicBlock::conv_params)
                .sum::<usize>()
    }

    pub fn classifier_view(&self) -> ClassifierView<'_, f32> {
        ClassifierView {
            weight: self.classifier.weight.data(),
            bias: self.classifier.bias.data(),
        }
    }

    /// Packs stacks into a `[3, N, H, W]` batch after checking their shape.
    pub fn input_batch(&self, stacks: &[&InputStack]) -> Result<FeatureMap> {
        let c = &self.config;
        for s in stacks {
            if s.channels.shape() != [c.in_channels, c.image_size, c.image_size] {
                return Err(Error::Domain(format!(
                    "input stack {} has shape {:?}, the model expects [{}, {s}, {s}]",
                    s.source,
                    s.channels.shape(),
                    c.in_channels,
                    s = c.image_size
                )));
            }
        }
        let samples: Vec<&[f32]> = stacks.iter().map(|s| s.channels.data()).collect();
        Ok(FeatureMap::from_samples(&samples, c.in_channels, c.image_size, c.image_size))
    }

    /// Raw (unnormalized) head outputs, row-major `[N, embedding_dim]`.
    pub(crate) fn forward_cached(&self, kind: HeadKind, x: &FeatureMap) -> (Vec<f32>, PathCache) {
        let (t, trunk) = self.trunk.forward(x);
        let (z, head) = self.head(kind).forward(t);
        (z, PathCache { trunk, head })
    }

    /// Accumulates parameter gradients for a gradient `dz` on the raw outputs.
    pub(crate) fn backward_path(&self, kind: HeadKind, cache: PathCache, dz: &[f32], grad: &mut DuCNModel) {
        let (head, head_grad) = match kind {
            HeadKind::Detection => (&self.detection, &mut grad.detection),
            HeadKind::Recommendation => (&self.recommendation, &mut grad.recommendation),
        };
        let dt = head.backward(cache.head, dz, head_grad);
        self.trunk.backward(cache.trunk, dt, &mut grad.trunk);
    }

    /// Unit-norm embeddings of one head, batched and run in parallel.
    pub fn embed(&self, kind: HeadKind, stacks: &[&InputStack]) -> Result<Vec<Vec<f32>>> {
        let dim = self.config.embedding_dim;
        let parts = stacks
            .par_chunks(EVAL_BATCH)
            .map(|chunk| {
                let x = self.input_batch(chunk)?;
                let (z, _) = self.forward_cached(kind, &x);
                Ok(z.chunks_exact(dim).map(|row| l2_normalize(row).0).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn forward_detection(&self, stacks: &[&InputStack]) -> Result<Vec<DetectionOutput>> {
        let view = self.classifier_view();
        Ok(self
            .embed(HeadKind::Detection, stacks)?
            .into_iter()
            .map(|e| {
                let l = view.logits(&e);
                DetectionOutput {
                    logits: [l[0], l[1]],
                    embedding: e,
                }
            })
            .collect())
    }

    pub fn forward_recommend(&self, stacks: &[&InputStack]) -> Result<Vec<Vec<f32>>> {
        self.embed(HeadKind::Recommendation, stacks)
    }

    pub fn predict(&self, stacks: &[&InputStack]) -> Result<Vec<Prediction>> {
        Ok(self
            .forward_detection(stacks)?
            .into_iter()
            .map(|o| Prediction::from_logits(o.logits))
            .collect())
    }

    pub fn save_params(&self, dir: &Path) -> Result<()> {
        checkpoint::save_params(dir, "params", self)
    }
}

impl Parameterized for DuCNModel {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.trunk.collect(&join(prefix, "trunk"), out);
        self.detection.collect(&join(prefix, "detection"), out);
        self.recommendation.collect(&join(prefix, "recommendation"), out);
        self.classifier.collect(&join(prefix, "classifier"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.trunk.collect_mut(&join(prefix, "trunk"), out);
        self.detection.collect_mut(&join(prefix, "detection"), out);
        self.recommendation.collect_mut(&join(prefix, "recommendation"), out);
        self.classifier.collect_mut(&join(prefix, "classifier"), out);
    }
}

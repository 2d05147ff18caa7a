//! Stage-1 lung segmentation: a U-Net trained with soft Dice loss.

use std::path::Path;

use num_traits::Float;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::nn::{
    chunked_gradients, join, relu_backward, relu_inplace, Adam, Conv2d, ConvCache,
    ConvTranspose2x2, FeatureMap, MaxPool, MaxPoolCache, Parameterized, TrainSchedule,
};
use crate::phantom::{DatasetManifest, Partition, SliceRecord};
use crate::rng::{stream_rng, streams};
use crate::tensor::Tensor;

/// Smoothing term added to numerator and denominator of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

const CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("U-Net depth and base_channels must be positive".into()));
        }
        if self.in_channels != 1 || self.out_channels != 1 {
            return Err(Error::Config("U-Net maps one input channel to one output channel".into()));
        }
        let factor = 1usize << self.depth;
        if image_size == 0 || image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} is not divisible by 2^{} = {factor}",
                self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DoubleConv {
    first: Conv2d,
    second: Conv2d,
}

struct DoubleConvCache {
    first: ConvCache,
    mid: FeatureMap,
    second: ConvCache,
    out: FeatureMap,
}

impl DoubleConv {
    fn new<R: rand::Rng>(rng: &mut R, cin: usize, cout: usize) -> Self {
        Self {
            first: Conv2d::new(rng, cin, cout, 3, 1, 1, 1.0),
            second: Conv2d::new(rng, cout, cout, 3, 1, 1, 1.0),
        }
    }

    fn forward(&self, x: &FeatureMap) -> (FeatureMap, DoubleConvCache) {
        let (mut mid, first) = self.first.forward(x);
        relu_inplace(&mut mid);
        let (mut out, second) = self.second.forward(&mid);
        relu_inplace(&mut out);
        let cache = DoubleConvCache {
            first,
            mid,
            second,
            out: out.clone(),
        };
        (out, cache)
    }

    fn backward(&self, cache: DoubleConvCache, mut dy: FeatureMap, grad: &mut DoubleConv) -> FeatureMap {
        relu_backward(&cache.out, &mut dy);
        let mut dmid = self
            .second
            .backward(cache.second, &dy, &mut grad.second, true)
            .expect("input grad requested");
        relu_backward(&cache.mid, &mut dmid);
        self.first
            .backward(cache.first, &dmid, &mut grad.first, true)
            .expect("input grad requested")
    }
}

impl Parameterized for DoubleConv {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.first.collect(&join(prefix, "0"), out);
        self.second.collect(&join(prefix, "1"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.first.collect_mut(&join(prefix, "0"), out);
        self.second.collect_mut(&join(prefix, "1"), out);
    }
}

/// Encoder/decoder with skip connections, ending in a 1×1 convolution and a
/// logistic output.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    image_size: usize,
    encoders: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    ups: Vec<ConvTranspose2x2>,
    decoders: Vec<DoubleConv>,
    head: Conv2d,
}

struct UNetCache {
    encoders: Vec<(DoubleConvCache, MaxPoolCache)>,
    bottleneck: DoubleConvCache,
    decoders: Vec<(FeatureMap, DoubleConvCache)>,
    head: ConvCache,
    probs: FeatureMap,
}

const POOL: MaxPool = MaxPool {
    kernel: 2,
    stride: 2,
    padding: 0,
};

pub fn build_unet(config: &UNetConfig, image_size: usize, seed: u64) -> Result<UNet> {
    config.validate(image_size)?;
    let mut rng = stream_rng(seed, streams::UNET_INIT);
    let mut encoders = Vec::new();
    let mut cin = config.in_channels;
    for level in 0..config.depth {
        encoders.push(DoubleConv::new(&mut rng, cin, config.width(level)));
        cin = config.width(level);
    }
    let bottleneck = DoubleConv::new(&mut rng, cin, config.width(config.depth));
    let mut ups = Vec::new();
    let mut decoders = Vec::new();
    for level in (0..config.depth).rev() {
        ups.push(ConvTranspose2x2::new(&mut rng, config.width(level + 1), config.width(level)));
        decoders.push(DoubleConv::new(&mut rng, 2 * config.width(level), config.width(level)));
    }
    let head = Conv2d::new(&mut rng, config.width(0), config.out_channels, 1, 1, 0, 0.5);
    Ok(UNet {
        config: config.clone(),
        image_size,
        encoders,
        bottleneck,
        ups,
        decoders,
        head,
    })
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl UNet {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels != 1 || x.height != self.image_size || x.width != self.image_size {
            return Err(Error::Domain(format!(
                "U-Net expects 1×{s}×{s} inputs, got {}×{}×{}",
                x.channels,
                x.height,
                x.width,
                s = self.image_size
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &FeatureMap) -> UNetCache {
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut enc_caches = Vec::with_capacity(self.config.depth);
        let mut cur = x.clone();
        for enc in &self.encoders {
            let (y, c) = enc.forward(&cur);
            let (pooled, pc) = POOL.forward(&y);
            skips.push(y);
            enc_caches.push((c, pc));
            cur = pooled;
        }
        let (mut cur, bottleneck) = self.bottleneck.forward(&cur);
        let mut decoders = Vec::with_capacity(self.config.depth);
        for ((up, dec), skip) in self.ups.iter().zip(&self.decoders).zip(skips.into_iter().rev()) {
            let (u, up_input) = up.forward(&cur);
            let joined = skip.concat_channels(&u);
            let (y, dc) = dec.forward(&joined);
            decoders.push((up_input, dc));
            cur = y;
        }
        let (mut probs, head) = self.head.forward(&cur);
        probs.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        UNetCache {
            encoders: enc_caches,
            bottleneck,
            decoders,
            head,
            probs,
        }
    }

    /// Per-pixel foreground probabilities, shape `[1, N, H, W]`.
    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).probs)
    }

    /// Backpropagates `dprobs` (gradient w.r.t. the sigmoid output).
    fn backward(&self, cache: UNetCache, dprobs: &FeatureMap, grad: &mut UNet) {
        let mut dz = dprobs.clone();
        for (d, &p) in dz.data.iter_mut().zip(&cache.probs.data) {
            *d *= p * (1.0 - p);
        }
        let mut d = self
            .head
            .backward(cache.head, &dz, &mut grad.head, true)
            .expect("input grad requested");
        let mut dskips = Vec::with_capacity(self.config.depth);
        for (i, (up_input, dc)) in cache.decoders.into_iter().enumerate().rev() {
            let djoined = self.decoders[i].backward(dc, d, &mut grad.decoders[i]);
            let skip_channels = djoined.channels / 2;
            let (dskip, du) = djoined.split_channels(skip_channels);
            dskips.push(dskip);
            d = self.ups[i].backward(up_input, &du, &mut grad.ups[i]);
        }
        d = self.bottleneck.backward(cache.bottleneck, d, &mut grad.bottleneck);
        // dskips is ordered shallow-to-deep after the reversed loop above.
        for (level, ((c, pc), dskip)) in cache.encoders.into_iter().zip(dskips).enumerate().rev() {
            let mut dy = POOL.backward(pc, &d);
            dy.add_assign(&dskip);
            d = self.encoders[level].backward(c, dy, &mut grad.encoders[level]);
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save_config(dir, &SavedUNet {
            unet: self.config.clone(),
            image_size: self.image_size,
        })?;
        checkpoint::save_params(dir, "params", self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let saved: SavedUNet = checkpoint::load_config(dir)?;
        let mut model = build_unet(&saved.unet, saved.image_size, 0)?;
        checkpoint::load_params(dir, "params", &mut model)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedUNet {
    unet: UNetConfig,
    image_size: usize,
}

impl Parameterized for UNet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, e) in self.encoders.iter().enumerate() {
            e.collect(&join(prefix, &format!("enc{i}")), out);
        }
        self.bottleneck.collect(&join(prefix, "bottleneck"), out);
        for (i, (u, d)) in self.ups.iter().zip(&self.decoders).enumerate() {
            u.collect(&join(prefix, &format!("up{i}")), out);
            d.collect(&join(prefix, &format!("dec{i}")), out);
        }
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.collect_mut(&join(prefix, &format!("enc{i}")), out);
        }
        self.bottleneck.collect_mut(&join(prefix, "bottleneck"), out);
        for (i, (u, d)) in self.ups.iter_mut().zip(self.decoders.iter_mut()).enumerate() {
            u.collect_mut(&join(prefix, &format!("up{i}")), out);
            d.collect_mut(&join(prefix, &format!("dec{i}")), out);
        }
        self.head.collect_mut(&join(prefix, "head"), out);
    }
}

/// Soft Dice loss `1 − (2·Σpt + ε) / (Σp + Σt + ε)`.
pub fn dice_loss<F: Float>(prediction: &[F], target: &[F]) -> Result<F> {
    dice_loss_with_grad(prediction, target).map(|(l, _)| l)
}

/// Dice loss and its gradient with respect to `prediction`.
pub fn dice_loss_with_grad<F: Float>(prediction: &[F], target: &[F]) -> Result<(F, Vec<F>)> {
    if prediction.len() != target.len() {
        return Err(Error::Domain(format!(
            "dice loss needs equal sizes, got {} and {}",
            prediction.len(),
            target.len()
        )));
    }
    let eps = F::from(DICE_SMOOTH).expect("representable");
    let two = F::one() + F::one();
    let mut inter = F::zero();
    let mut sum = F::zero();
    for (&p, &t) in prediction.iter().zip(target) {
        inter = inter + p * t;
        sum = sum + p + t;
    }
    let num = two * inter + eps;
    let den = sum + eps;
    let loss = F::one() - num / den;
    let den2 = den * den;
    let grad = target
        .iter()
        .map(|&t| -(two * t * den - num) / den2)
        .collect();
    Ok((loss, grad))
}

/// Hard Dice `(2|P∩T| + ε) / (|P| + |T| + ε)` between two binary masks.
pub fn hard_dice(prediction: &Mask, target: &Mask) -> Result<f64> {
    if prediction.height != target.height || prediction.width != target.width {
        return Err(Error::Domain("dice needs masks of equal shape".into()));
    }
    let mut inter = 0usize;
    for (&p, &t) in prediction.data.iter().zip(&target.data) {
        inter += usize::from(p == 1 && t == 1);
    }
    let total = prediction.count() + target.count();
    Ok((2.0 * inter as f64 + DICE_SMOOTH) / (total as f64 + DICE_SMOOTH))
}

/// Binarizes probabilities at 0.5 (values ≥ 0.5 are foreground).
pub fn threshold_mask(probs: &[f32], height: usize, width: usize) -> Result<Mask> {
    Mask::from_vec(height, width, probs.iter().map(|&p| u8::from(p >= 0.5)).collect())
}

fn image_batch(images: &[&Image]) -> FeatureMap {
    let (h, w) = (images[0].height, images[0].width);
    let samples: Vec<&[f32]> = images.iter().map(|i| i.data.as_slice()).collect();
    FeatureMap::from_samples(&samples, 1, h, w)
}

pub fn predict_mask(model: &UNet, image: &Image) -> Result<Mask> {
    Ok(predict_masks(model, std::slice::from_ref(image))?.remove(0))
}

pub fn predict_masks(model: &UNet, images: &[Image]) -> Result<Vec<Mask>> {
    if let Some(bad) = images
        .iter()
        .find(|i| i.height != model.image_size || i.width != model.image_size)
    {
        return Err(Error::Domain(format!(
            "image is {}×{}, model was built for {s}×{s}",
            bad.height,
            bad.width,
            s = model.image_size
        )));
    }
    let chunks: Vec<Result<Vec<Mask>>> = images
        .par_chunks(CHUNK)
        .map(|chunk| {
            let refs: Vec<&Image> = chunk.iter().collect();
            let probs = model.forward(&image_batch(&refs))?;
            let hw = model.image_size * model.image_size;
            probs
                .data
                .chunks_exact(hw)
                .map(|p| threshold_mask(p, model.image_size, model.image_size))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(images.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub lr: f32,
    pub mean_loss: f64,
}

fn training_records(manifest: &DatasetManifest) -> Vec<&SliceRecord> {
    if manifest.split.is_some() {
        manifest.records_in(Partition::Train)
    } else {
        manifest.records.iter().collect()
    }
}

/// Trains a fresh U-Net on the manifest's train partition (or all records if
/// it has no split) by minimizing the batch-mean Dice loss with Adam.
pub fn train_seg(
    manifest: &DatasetManifest,
    config: &UNetConfig,
    schedule: &TrainSchedule,
) -> Result<(UNet, Vec<SegEpoch>)> {
    let records = training_records(manifest);
    if records.is_empty() {
        return Err(Error::Data("segmentation needs a non-empty train split".into()));
    }
    let mut samples = Vec::with_capacity(records.len());
    for r in &records {
        let image = manifest.load_image(r)?;
        let mask = manifest.load_mask(r)?;
        let target: Vec<f32> = mask.data.iter().map(|&v| f32::from(v)).collect();
        samples.push((image, target));
    }
    let size = samples[0].0.height;
    let mut model = build_unet(config, size, schedule.seed)?;
    let mut adam = Adam::new(&model);
    let lr_schedule = schedule.lr_schedule();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(schedule.epochs);
    let batch_size = schedule.batch_size.max(1);

    for epoch in 1..=schedule.epochs {
        let mut rng = stream_rng(schedule.seed, streams::SEG_SHUFFLE + epoch as u64);
        order.shuffle(&mut rng);
        let lr = lr_schedule.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let (grads, loss) = chunked_gradients(&model, batch, CHUNK, schedule.deterministic, |chunk, grad| {
                let images: Vec<&Image> = chunk.iter().map(|&i| &samples[i].0).collect();
                let cache = model.forward_cached(&image_batch(&images));
                let hw = size * size;
                let mut dprobs = FeatureMap {
                    data: vec![0.0; cache.probs.data.len()],
                    ..cache.probs.clone()
                };
                let mut loss = 0.0;
                for (k, &i) in chunk.iter().enumerate() {
                    let p = &cache.probs.data[k * hw..(k + 1) * hw];
                    let (l, g) = dice_loss_with_grad(p, &samples[i].1).expect("equal sizes");
                    loss += l as f64;
                    for (d, gv) in dprobs.data[k * hw..(k + 1) * hw].iter_mut().zip(g) {
                        *d = gv * scale;
                    }
                }
                model.backward(cache, &dprobs, grad);
                loss
            });
            adam.step(&mut model, &grads, lr)?;
            epoch_loss += loss;
        }
        let mean_loss = epoch_loss / samples.len() as f64;
        log::info!("seg epoch {epoch}: lr {lr:.2e} dice loss {mean_loss:.4}");
        history.push(SegEpoch { epoch, lr, mean_loss });
    }
    Ok((model, history))
}

/// Mean hard Dice of the model's masks against ground truth over a partition.
pub fn evaluate_dice(model: &UNet, manifest: &DatasetManifest, partition: Partition) -> Result<f64> {
    let records = manifest.records_in(partition);
    if records.is_empty() {
        return Err(Error::Data(format!("no slices in the {partition:?} partition")));
    }
    let images = records
        .iter()
        .map(|r| manifest.load_image(r))
        .collect::<Result<Vec<_>>>()?;
    let predicted = predict_masks(model, &images)?;
    let mut total = 0.0;
    for (r, p) in records.iter().zip(&predicted) {
        total += hard_dice(p, &manifest.load_mask(r)?)?;
    }
    Ok(total / records.len() as f64)
}

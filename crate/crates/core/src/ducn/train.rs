use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::input::{AblationMode, InputStack};
use super::loss::{element_loss, ClassifierView, LossBreakdown, LossWeights};
use super::model::{build_ducn, DuCNConfig, DuCNModel, HeadKind, Init};
use super::sampler::{Regime, SliceMeta, TripletSample, TripletSampler};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{chunked_gradients, Adam, AdamState, TrainSchedule};
use crate::rng::{stream_rng, streams};

/// Batch elements per gradient chunk.
const CHUNK: usize = 8;

/// Input stacks of the training partition together with their sampler.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub stacks: Vec<InputStack>,
    pub sampler: TripletSampler,
}

impl TrainingSet {
    pub fn new(stacks: Vec<InputStack>, meta: Vec<SliceMeta>) -> Result<Self> {
        if stacks.len() != meta.len() {
            return Err(Error::Data(format!("{} stacks but {} slice records", stacks.len(), meta.len())));
        }
        if stacks.is_empty() {
            return Err(Error::Data("the training set is empty".into()));
        }
        Ok(Self {
            stacks,
            sampler: TripletSampler::new(meta),
        })
    }

    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }

    /// One detection and one recommendation triplet per batch element.
    pub fn sample_batch<R: Rng>(&self, rng: &mut R, batch_size: usize) -> Result<(Vec<TripletSample>, Vec<TripletSample>)> {
        let mut det = Vec::with_capacity(batch_size);
        let mut rec = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            det.push(self.sampler.sample_detection(rng)?);
            rec.push(self.sampler.sample_recommendation(rng)?);
        }
        Ok((det, rec))
    }

    fn members(&self, t: &TripletSample) -> [&InputStack; 3] {
        [&self.stacks[t.anchor], &self.stacks[t.positive], &self.stacks[t.negative]]
    }
}

fn check_batch(det: &[TripletSample], rec: &[TripletSample], weights: &LossWeights) -> Result<()> {
    weights.validate()?;
    if det.len() != rec.len() || det.is_empty() {
        return Err(Error::Domain(format!(
            "need equally many detection and recommendation triplets, got {} and {}",
            det.len(),
            rec.len()
        )));
    }
    if det.iter().any(|t| t.regime != Regime::Detection) || rec.iter().any(|t| t.regime != Regime::Recommendation) {
        return Err(Error::Domain("triplet regime does not match its loss path".into()));
    }
    Ok(())
}

/// Raw head outputs for the stacked members of a chunk of triplets.
fn path_inputs<'a>(set: &'a TrainingSet, triplets: &[TripletSample]) -> Vec<&'a InputStack> {
    triplets.iter().flat_map(|t| set.members(t)).collect()
}

/// Mean loss over the batch without gradients.
pub fn batch_loss(
    model: &DuCNModel,
    set: &TrainingSet,
    det: &[TripletSample],
    rec: &[TripletSample],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    check_batch(det, rec, weights)?;
    let dim = model.config().embedding_dim;
    let det_x = model.input_batch(&path_inputs(set, det))?;
    let rec_x = model.input_batch(&path_inputs(set, rec))?;
    let (zd, _) = model.forward_cached(HeadKind::Detection, &det_x);
    let (zr, _) = model.forward_cached(HeadKind::Recommendation, &rec_x);
    let mut total = LossBreakdown::default();
    for (d, r) in zd.chunks_exact(3 * dim).zip(zr.chunks_exact(3 * dim)) {
        let d: Vec<&[f32]> = d.chunks_exact(dim).collect();
        let r: Vec<&[f32]> = r.chunks_exact(dim).collect();
        let (b, _) = element_loss([d[0], d[1], d[2]], [r[0], r[1], r[2]], model.classifier_view(), weights)?;
        total += b;
    }
    Ok(total.scaled(1.0 / det.len() as f64))
}

/// The joint loss of a single (detection, recommendation) triplet pair.
pub fn total_loss(
    model: &DuCNModel,
    set: &TrainingSet,
    det: &TripletSample,
    rec: &TripletSample,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    batch_loss(model, set, std::slice::from_ref(det), std::slice::from_ref(rec), weights)
}

/// Gradient of the mean batch loss with respect to every parameter.
pub fn batch_gradients(
    model: &DuCNModel,
    set: &TrainingSet,
    det: &[TripletSample],
    rec: &[TripletSample],
    weights: &LossWeights,
    sequential: bool,
) -> Result<(DuCNModel, LossBreakdown)> {
    check_batch(det, rec, weights)?;
    for t in det.iter().chain(rec) {
        for s in set.members(t) {
            model.input_batch(&[s])?;
        }
    }
    let dim = model.config().embedding_dim;
    let scale = 1.0 / det.len() as f32;
    let pairs: Vec<(TripletSample, TripletSample)> = det.iter().copied().zip(rec.iter().copied()).collect();
    let (grads, total) = chunked_gradients(model, &pairs, CHUNK, sequential, |chunk, grad| {
        let (d, r): (Vec<_>, Vec<_>) = chunk.iter().copied().unzip();
        let det_x = model.input_batch(&path_inputs(set, &d)).expect("shapes checked");
        let rec_x = model.input_batch(&path_inputs(set, &r)).expect("shapes checked");
        let (zd, det_cache) = model.forward_cached(HeadKind::Detection, &det_x);
        let (zr, rec_cache) = model.forward_cached(HeadKind::Recommendation, &rec_x);
        let mut dzd = vec![0.0f32; zd.len()];
        let mut dzr = vec![0.0f32; zr.len()];
        let mut summary = LossBreakdown::default();
        let view: ClassifierView<'_, f32> = model.classifier_view();
        for k in 0..chunk.len() {
            let rows = |z: &[f32], m: usize| z[(3 * k + m) * dim..(3 * k + m + 1) * dim].to_vec();
            let drows = [rows(&zd, 0), rows(&zd, 1), rows(&zd, 2)];
            let rrows = [rows(&zr, 0), rows(&zr, 1), rows(&zr, 2)];
            let (b, g) = element_loss(
                [&drows[0], &drows[1], &drows[2]],
                [&rrows[0], &rrows[1], &rrows[2]],
                view,
                weights,
            )
            .expect("dimensions agree");
            summary += b;
            for m in 0..3 {
                let at = (3 * k + m) * dim;
                for i in 0..dim {
                    dzd[at + i] = g.det_raw[m][i] * scale;
                    dzr[at + i] = g.rec_raw[m][i] * scale;
                }
            }
            for (acc, v) in grad.classifier.weight.data_mut().iter_mut().zip(&g.classifier_weight) {
                *acc += v * scale;
            }
            for (acc, v) in grad.classifier.bias.data_mut().iter_mut().zip(&g.classifier_bias) {
                *acc += v * scale;
            }
        }
        model.backward_path(HeadKind::Detection, det_cache, &dzd, grad);
        model.backward_path(HeadKind::Recommendation, rec_cache, &dzr, grad);
        summary
    });
    Ok((grads, total.scaled(1.0 / det.len() as f64)))
}

/// Samples a batch, computes the joint gradient and applies one Adam update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng>(
    model: &mut DuCNModel,
    adam: &mut Adam,
    set: &TrainingSet,
    weights: &LossWeights,
    batch_size: usize,
    lr: f32,
    rng: &mut R,
    sequential: bool,
) -> Result<LossBreakdown> {
    let (det, rec) = set.sample_batch(rng, batch_size.max(1))?;
    let (grads, loss) = batch_gradients(model, set, &det, &rec, weights, sequential)?;
    adam.step(model, &grads, lr)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub steps: usize,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
}

/// Runs `schedule.epochs` epochs of `ceil(|train| / batch)` steps each.
/// Triplets for epoch `e` come from their own seed stream, so a resumed
/// run samples the same triplets as an uninterrupted one.
pub fn train_ducn(
    model: &mut DuCNModel,
    adam: &mut Adam,
    set: &TrainingSet,
    weights: &LossWeights,
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    weights.validate()?;
    let batch = schedule.batch_size.max(1);
    let steps = set.len().div_ceil(batch);
    let lr_schedule = schedule.lr_schedule();
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 1..=schedule.epochs {
        let lr = lr_schedule.lr_at(epoch);
        let mut rng = stream_rng(schedule.seed, streams::TRIPLETS + epoch as u64);
        let mut sum = LossBreakdown::default();
        for _ in 0..steps {
            sum += train_step(model, adam, set, weights, batch, lr, &mut rng, schedule.deterministic)?;
        }
        let log = EpochLog {
            epoch,
            lr,
            steps,
            loss: sum.scaled(1.0 / steps as f64),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} total {:.4} (D {:.4}: triplet {:.4}, ce {:.4}; SCR {:.4})",
            log.loss.l_total,
            log.loss.l_d,
            log.loss.l_triplet_det,
            log.loss.l_ce,
            log.loss.l_scr
        );
        on_epoch(&log);
        history.push(log);
    }
    Ok(history)
}

/// Everything needed to rebuild and audit a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: DuCNConfig,
    pub init: Init,
    pub seed: u64,
    pub ablation: AblationMode,
    /// Content hash of the manifest and split the model was trained on.
    pub manifest_hash: String,
    /// Parameter hash before the first update.
    pub init_param_hash: String,
    pub epochs: usize,
}

pub fn save_checkpoint(dir: &Path, model: &DuCNModel, adam: &AdamState, meta: &CheckpointMeta) -> Result<()> {
    checkpoint::save_config(dir, meta)?;
    model.save_params(dir)?;
    checkpoint::save_optimizer(dir, model, adam)
}

/// Loads a checkpoint, refusing one trained on a different manifest unless
/// `allow_mismatch` is set.
pub fn load_checkpoint(
    dir: &Path,
    expected_manifest_hash: Option<&str>,
    allow_mismatch: bool,
) -> Result<(DuCNModel, AdamState, CheckpointMeta)> {
    let meta: CheckpointMeta = checkpoint::load_config(dir)?;
    if let Some(expected) = expected_manifest_hash {
        if expected != meta.manifest_hash {
            if !allow_mismatch {
                return Err(Error::Mismatch(format!(
                    "checkpoint {} was trained on manifest {} but the current manifest is {expected}",
                    dir.display(),
                    meta.manifest_hash
                )));
            }
            log::warn!("using checkpoint trained on a different manifest ({})", meta.manifest_hash);
        }
    }
    let mut model = build_ducn(&meta.model, &Init::SeededRandom, 0)?;
    checkpoint::load_params(dir, "params", &mut model)?;
    let adam = checkpoint::load_optimizer(dir, &model)?;
    Ok((model, adam, meta))
}

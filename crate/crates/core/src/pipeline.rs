//! End-to-end stages over a workspace directory. Each stage reads what the
//! earlier ones wrote, and every CLI subcommand is one of these functions.
//!
//! Workspace layout:
//!
//! ```text
//! data/                 manifest.jsonl, split.json, images/, masks/
//! seg/                  U-Net checkpoint, history.json, eval.json
//! channels/<mode>/      one [3, H, W] input stack per slice, channels.json
//! runs/<mode>/          DuCN checkpoint, history.json, eval.json, eval.txt
//! index/<mode>/         entries.jsonl, embeddings.ntf, meta.json
//! ablate/               grid.json, grid.txt, runs/<mode>/
//! config.resolved.json  the configuration of the latest command
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::caseindex::{build_index, recommend_for_confirmed, CaseId, EmbeddingIndex, IndexScope, RecommendOutcome};
use crate::checkpoint::param_hash;
use crate::ducn::{
    build_ducn, compose_input_stack, load_checkpoint, save_checkpoint, train_ducn, AblationMode, CheckpointMeta,
    DuCNConfig, DuCNModel, EpochLog, Init, InputStack, LossWeights, Prediction, SliceMeta, TrainingSet,
};
use crate::edt::{intrapulmonary_edt, normalize_map, DistanceMap};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::image::{Image, Mask};
use crate::metrics::{self, Evaluation, ScoredSlice};
use crate::nn::{Adam, TrainSchedule};
use crate::ntf;
use crate::phantom::{
    balance_by_augmentation, generate_dataset, split_by_patient, ClassLabel, DatasetManifest, Partition, PhantomConfig,
    SliceRecord,
};
use crate::segnet::{evaluate_dice, predict_masks, train_seg, SegEpoch, UNet, UNetConfig};

pub const SNAPSHOT_FILE: &str = "config.resolved.json";
pub const CHANNELS_META_FILE: &str = "channels.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub halve_every: usize,
}

impl OptimizerConfig {
    fn validate(&self, what: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.halve_every == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "{what}: epochs, batch_size and halve_every must be positive and lr > 0"
            )));
        }
        Ok(())
    }

    pub fn schedule(&self, seed: u64, deterministic: bool) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            halve_every: self.halve_every,
            seed,
            deterministic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexSettings {
    pub scope: IndexScope,
    pub topk: usize,
    pub exclude_self: bool,
}

impl Default for IndexSettings {
    fn default() -> Self {
        Self {
            scope: IndexScope::NcpOnly,
            topk: 5,
            exclude_self: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Workspace root.
    pub root: Option<PathBuf>,
    /// A U-Net checkpoint directory to use instead of `<root>/seg`, for
    /// segmenting with a model trained on another dataset.
    pub segmentation: Option<PathBuf>,
}

/// Every setting of a run. `seed` drives phantom generation, the split and
/// every initialization and sampling stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub phantom: PhantomConfig,
    pub train_fraction: f64,
    pub unet: UNetConfig,
    pub segmentation: OptimizerConfig,
    pub ducn: DuCNConfig,
    pub init: Init,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub ablation: AblationMode,
    pub ablate_epochs: usize,
    pub index: IndexSettings,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            phantom: PhantomConfig::default(),
            train_fraction: 0.7,
            unet: UNetConfig::default(),
            segmentation: OptimizerConfig {
                epochs: 10,
                batch_size: 8,
                lr: 1e-3,
                halve_every: 20,
            },
            ducn: DuCNConfig::default(),
            init: Init::PretrainedStub,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig {
                epochs: 40,
                batch_size: 32,
                lr: 1e-3,
                halve_every: 20,
            },
            ablation: AblationMode::Full,
            ablate_epochs: 5,
            index: IndexSettings::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        fsutil::read_json(path)
    }

    /// Propagates the master seed and checks cross-module consistency.
    pub fn resolve(mut self) -> Result<Self> {
        self.phantom.seed = self.seed;
        self.phantom.validate()?;
        self.weights.validate()?;
        self.ducn.validate()?;
        self.unet.validate(self.phantom.image_size)?;
        self.segmentation.validate("segmentation")?;
        self.optimizer.validate("optimizer")?;
        if self.ducn.image_size != self.phantom.image_size {
            return Err(Error::Config(format!(
                "network input size {} differs from phantom size {}",
                self.ducn.image_size, self.phantom.image_size
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if self.ablate_epochs == 0 || self.index.topk == 0 {
            return Err(Error::Config("ablate_epochs and index.topk must be positive".into()));
        }
        Ok(self)
    }

    /// Initialization used for `mode`: the UP ablation swaps in fresh random
    /// weights, every other mode uses the configured init.
    pub fn init_for(&self, mode: AblationMode) -> Init {
        match mode {
            AblationMode::Up => Init::SeededRandom,
            _ => self.init.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Workspace {
    root: PathBuf,
    segmentation: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: &RunConfig) -> Self {
        let root = root.into();
        let segmentation = config.paths.segmentation.clone().unwrap_or_else(|| root.join("seg"));
        Self { root, segmentation }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn seg_dir(&self) -> &Path {
        &self.segmentation
    }

    pub fn channels_dir(&self, mode: AblationMode) -> PathBuf {
        self.root.join("channels").join(mode.as_str())
    }

    pub fn run_dir(&self, mode: AblationMode) -> PathBuf {
        self.root.join("runs").join(mode.as_str())
    }

    pub fn index_dir(&self, mode: AblationMode) -> PathBuf {
        self.root.join("index").join(mode.as_str())
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.root.join("ablate")
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::load(&self.data_dir())
    }

    fn split_manifest(&self) -> Result<DatasetManifest> {
        let manifest = self.manifest()?;
        if manifest.split.is_none() {
            return Err(Error::Data("the dataset has no train/test split; run `split` first".into()));
        }
        Ok(manifest)
    }
}

pub fn write_snapshot(config: &RunConfig, ws: &Workspace) -> Result<()> {
    fsutil::write_json(&ws.root.join(SNAPSHOT_FILE), config)
}

pub fn generate(config: &RunConfig, ws: &Workspace) -> Result<DatasetManifest> {
    generate_dataset(&config.phantom, &ws.data_dir())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train_patients: usize,
    pub test_patients: usize,
    pub train_slices: BTreeMap<ClassLabel, usize>,
    pub test_slices: BTreeMap<ClassLabel, usize>,
    pub augmented: usize,
}

/// Patient-level split, then NCP balancing of the train partition. Earlier
/// augmented copies are dropped first so the stage can be re-run.
pub fn split(config: &RunConfig, ws: &Workspace) -> Result<SplitSummary> {
    let mut manifest = ws.manifest()?;
    manifest.records.retain(|r| r.augmented_from.is_none());
    manifest.split = None;
    let split = split_by_patient(&manifest, config.train_fraction, config.seed)?;
    let balanced = balance_by_augmentation(&split, ClassLabel::NCP)?;
    balanced.save()?;
    let assignment = balanced.split.as_ref().expect("just split");
    Ok(SplitSummary {
        train_patients: assignment.values().filter(|&&p| p == Partition::Train).count(),
        test_patients: assignment.values().filter(|&&p| p == Partition::Test).count(),
        train_slices: balanced.class_counts(Some(Partition::Train)),
        test_slices: balanced.class_counts(Some(Partition::Test)),
        augmented: balanced.records.len() - split.records.len(),
    })
}

pub fn train_segmentation(config: &RunConfig, ws: &Workspace) -> Result<Vec<SegEpoch>> {
    let manifest = ws.split_manifest()?;
    let schedule = config.segmentation.schedule(config.seed, config.deterministic);
    let (model, history) = train_seg(&manifest, &config.unet, &schedule)?;
    model.save(ws.seg_dir())?;
    fsutil::write_json(&ws.seg_dir().join("history.json"), &history)?;
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub dice: f64,
    pub slices: usize,
}

/// Mean hard Dice on the test partition.
pub fn evaluate_segmentation(ws: &Workspace) -> Result<SegReport> {
    let manifest = ws.split_manifest()?;
    let model = UNet::load(ws.seg_dir())?;
    let report = SegReport {
        dice: evaluate_dice(&model, &manifest, Partition::Test)?,
        slices: manifest.records_in(Partition::Test).len(),
    };
    fsutil::write_json(&ws.seg_dir().join("eval.json"), &report)?;
    Ok(report)
}

/// Raw image, predicted mask and normalized distance map of one slice.
pub struct SliceChannels {
    pub raw: Image,
    pub mask: Mask,
    pub dmap: DistanceMap,
}

impl SliceChannels {
    pub fn compose(&self, mode: AblationMode, source: String, label: Option<ClassLabel>) -> Result<InputStack> {
        compose_input_stack(&self.raw, &self.mask, &self.dmap, mode, source, label)
    }
}

/// Segments every image and derives its distance map.
pub fn segment(model: &UNet, images: Vec<Image>) -> Result<Vec<SliceChannels>> {
    let masks = predict_masks(model, &images)?;
    images
        .into_iter()
        .zip(masks)
        .map(|(raw, mask)| {
            let dmap = normalize_map(&intrapulmonary_edt(&mask)?);
            Ok(SliceChannels { raw, mask, dmap })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelsMeta {
    pub mode: AblationMode,
    pub manifest_hash: String,
    /// Parameter hash of the U-Net that produced the masks.
    pub segmentation_hash: String,
    /// SHA-256 over every stack's values in manifest order.
    pub data_hash: String,
    pub slices: usize,
}

pub fn stacks_hash(stacks: &[InputStack]) -> String {
    let mut hasher = Sha256::new();
    for s in stacks {
        for v in s.channels.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

fn stack_path(ws: &Workspace, mode: AblationMode, record: &SliceRecord) -> PathBuf {
    ws.channels_dir(mode).join(format!("{}.ntf", record.file_stem()))
}

fn segment_manifest(ws: &Workspace, manifest: &DatasetManifest) -> Result<(Vec<SliceChannels>, String)> {
    let model = UNet::load(ws.seg_dir())?;
    let images = manifest
        .records
        .iter()
        .map(|r| manifest.load_image(r))
        .collect::<Result<Vec<_>>>()?;
    Ok((segment(&model, images)?, param_hash(&model)))
}

fn write_stacks(
    ws: &Workspace,
    manifest: &DatasetManifest,
    channels: &[SliceChannels],
    segmentation_hash: &str,
    mode: AblationMode,
) -> Result<ChannelsMeta> {
    let stacks = manifest
        .records
        .iter()
        .zip(channels)
        .map(|(r, c)| c.compose(mode, r.key(), Some(r.label)))
        .collect::<Result<Vec<_>>>()?;
    for (r, s) in manifest.records.iter().zip(&stacks) {
        s.save(&stack_path(ws, mode, r))?;
    }
    let meta = ChannelsMeta {
        mode,
        manifest_hash: manifest.content_hash()?,
        segmentation_hash: segmentation_hash.to_string(),
        data_hash: stacks_hash(&stacks),
        slices: stacks.len(),
    };
    fsutil::write_json(&ws.channels_dir(mode).join(CHANNELS_META_FILE), &meta)?;
    Ok(meta)
}

/// Predicted mask → distance map → input stack for every slice.
pub fn make_channels(ws: &Workspace, mode: AblationMode) -> Result<ChannelsMeta> {
    let manifest = ws.split_manifest()?;
    let (channels, seg_hash) = segment_manifest(ws, &manifest)?;
    write_stacks(ws, &manifest, &channels, &seg_hash, mode)
}

/// Loads the stacks of `records`, refusing channels made from another manifest.
pub fn load_stacks(
    ws: &Workspace,
    manifest: &DatasetManifest,
    mode: AblationMode,
    records: &[&SliceRecord],
) -> Result<Vec<InputStack>> {
    let meta_path = ws.channels_dir(mode).join(CHANNELS_META_FILE);
    if !meta_path.exists() {
        return Err(Error::Data(format!(
            "no {mode} input channels in {}; run `make-channels --ablation {mode}` first",
            ws.channels_dir(mode).display()
        )));
    }
    let meta: ChannelsMeta = fsutil::read_json(&meta_path)?;
    if meta.manifest_hash != manifest.content_hash()? {
        return Err(Error::Mismatch(format!(
            "{mode} channels were made from a different manifest; run `make-channels` again"
        )));
    }
    records
        .iter()
        .map(|r| InputStack::load(&stack_path(ws, mode, r), mode, r.key(), Some(r.label)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: AblationMode,
    pub init: Init,
    pub init_param_hash: String,
    /// Hash of the training stacks.
    pub data_hash: String,
    pub train_slices: usize,
    pub history: Vec<EpochLog>,
}

/// Trains a DuCN on the train partition and writes its checkpoint to `run_dir`.
pub fn train(
    config: &RunConfig,
    ws: &Workspace,
    mode: AblationMode,
    epochs: usize,
    run_dir: &Path,
) -> Result<TrainReport> {
    let manifest = ws.split_manifest()?;
    let records = manifest.records_in(Partition::Train);
    let stacks = load_stacks(ws, &manifest, mode, &records)?;
    train_on(config, &manifest, mode, epochs, run_dir, stacks, &records)
}

fn train_on(
    config: &RunConfig,
    manifest: &DatasetManifest,
    mode: AblationMode,
    epochs: usize,
    run_dir: &Path,
    stacks: Vec<InputStack>,
    records: &[&SliceRecord],
) -> Result<TrainReport> {
    let init = config.init_for(mode);
    let mut model = build_ducn(&config.ducn, &init, config.seed)?;
    let init_param_hash = param_hash(&model);
    let data_hash = stacks_hash(&stacks);
    let set = TrainingSet::new(stacks, records.iter().map(|r| SliceMeta::of(r)).collect())?;
    let mut adam = Adam::new(&model);
    let schedule = TrainSchedule {
        epochs,
        ..config.optimizer.schedule(config.seed, config.deterministic)
    };
    let history = train_ducn(&mut model, &mut adam, &set, &config.weights, &schedule, |_| {})?;
    let meta = CheckpointMeta {
        model: config.ducn.clone(),
        init: init.clone(),
        seed: config.seed,
        ablation: mode,
        manifest_hash: manifest.content_hash()?,
        init_param_hash: init_param_hash.clone(),
        epochs,
    };
    save_checkpoint(run_dir, &model, &adam.state, &meta)?;
    let report = TrainReport {
        mode,
        init,
        init_param_hash,
        data_hash,
        train_slices: set.len(),
        history,
    };
    fsutil::write_json(&run_dir.join("train.json"), &report)?;
    Ok(report)
}

fn load_model(run_dir: &Path, manifest: &DatasetManifest, allow_mismatch: bool) -> Result<(DuCNModel, CheckpointMeta)> {
    let (model, _, meta) = load_checkpoint(run_dir, Some(&manifest.content_hash()?), allow_mismatch)?;
    Ok((model, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: AblationMode,
    #[serde(flatten)]
    pub evaluation: Evaluation,
}

impl EvalReport {
    pub fn render(&self) -> String {
        format!(
            "{} test slices ({}):\n{}\npatient-level majority vote ({} patients):\n{}",
            self.evaluation.slice.n,
            self.mode,
            metrics::format_report(&self.evaluation.slice),
            self.evaluation.patient.n,
            metrics::format_report(&self.evaluation.patient)
        )
    }
}

fn evaluate_model(
    model: &DuCNModel,
    mode: AblationMode,
    records: &[&SliceRecord],
    stacks: &[InputStack],
) -> Result<EvalReport> {
    let refs: Vec<&InputStack> = stacks.iter().collect();
    let predictions = model.predict(&refs)?;
    let scored: Vec<ScoredSlice> = records
        .iter()
        .zip(&predictions)
        .map(|(r, p)| ScoredSlice {
            patient_id: r.patient_id.clone(),
            p_ncp: f64::from(p.p_ncp),
            positive: p.positive,
            label: r.label.target(),
        })
        .collect();
    Ok(EvalReport {
        mode,
        evaluation: metrics::evaluate(&scored)?,
    })
}

/// Detection metrics of the checkpoint in `run_dir` on the test partition.
pub fn evaluate(ws: &Workspace, mode: AblationMode, run_dir: &Path, allow_mismatch: bool) -> Result<EvalReport> {
    let manifest = ws.split_manifest()?;
    let (model, _) = load_model(run_dir, &manifest, allow_mismatch)?;
    let records = manifest.records_in(Partition::Test);
    let stacks = load_stacks(ws, &manifest, mode, &records)?;
    let report = evaluate_model(&model, mode, &records, &stacks)?;
    fsutil::write_json(&run_dir.join("eval.json"), &report)?;
    fsutil::write_atomic(&run_dir.join("eval.txt"), report.render().as_bytes())?;
    Ok(report)
}

/// Indexes every original (non-augmented) slice within the configured scope.
pub fn build_case_index(
    config: &RunConfig,
    ws: &Workspace,
    mode: AblationMode,
    allow_mismatch: bool,
) -> Result<EmbeddingIndex> {
    let manifest = ws.split_manifest()?;
    let (model, _) = load_model(&ws.run_dir(mode), &manifest, allow_mismatch)?;
    let records: Vec<&SliceRecord> = manifest.records.iter().filter(|r| r.augmented_from.is_none()).collect();
    let stacks = load_stacks(ws, &manifest, mode, &records)?;
    let stack_refs: Vec<&InputStack> = stacks.iter().collect();
    let index = build_index(&model, &records, &stack_refs, config.index.scope, &manifest.content_hash()?)?;
    index.save(&ws.index_dir(mode))?;
    Ok(index)
}

/// A slice to run inference on.
#[derive(Clone, Debug, PartialEq)]
pub enum SliceInput {
    /// `patient/scan/slice` of a manifest record with prepared channels.
    Key(String),
    /// A raw `.ntf` image; it is segmented and stacked on the fly.
    Image(PathBuf),
}

fn resolve_input(
    ws: &Workspace,
    manifest: &DatasetManifest,
    mode: AblationMode,
    input: &SliceInput,
) -> Result<(InputStack, Option<CaseId>)> {
    match input {
        SliceInput::Key(key) => {
            let record = manifest
                .records
                .iter()
                .find(|r| &r.key() == key)
                .ok_or_else(|| Error::Data(format!("no slice {key} in the manifest")))?;
            let stack = load_stacks(ws, manifest, mode, &[record])?.remove(0);
            Ok((stack, Some(CaseId::of(record))))
        }
        SliceInput::Image(path) => {
            let model = UNet::load(ws.seg_dir())?;
            let image = ntf::read_image(path)?;
            let channels = segment(&model, vec![image])?.remove(0);
            Ok((channels.compose(mode, path.display().to_string(), None)?, None))
        }
    }
}

pub fn infer(ws: &Workspace, mode: AblationMode, input: &SliceInput, allow_mismatch: bool) -> Result<Prediction> {
    let manifest = ws.split_manifest()?;
    let (model, _) = load_model(&ws.run_dir(mode), &manifest, allow_mismatch)?;
    let (stack, _) = resolve_input(ws, &manifest, mode, input)?;
    Ok(model.predict(&[&stack])?.remove(0))
}

/// Similar confirmed cases for a slice the network calls NCP.
pub fn recommend(
    config: &RunConfig,
    ws: &Workspace,
    mode: AblationMode,
    input: &SliceInput,
    allow_mismatch: bool,
) -> Result<RecommendOutcome> {
    let manifest = ws.split_manifest()?;
    let (model, _) = load_model(&ws.run_dir(mode), &manifest, allow_mismatch)?;
    let index = EmbeddingIndex::load(&ws.index_dir(mode))?;
    if index.manifest_hash() != manifest.content_hash()? && !allow_mismatch {
        return Err(Error::Mismatch("the case index was built from a different manifest; run `index` again".into()));
    }
    let (stack, id) = resolve_input(ws, &manifest, mode, input)?;
    let exclude = if config.index.exclude_self { id.as_ref() } else { None };
    recommend_for_confirmed(&model, &index, &stack, config.index.topk, exclude)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub epochs: usize,
    pub init: Init,
    pub init_param_hash: String,
    pub data_hash: String,
    pub final_loss: f64,
    #[serde(flatten)]
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn render(&self) -> String {
        let rows: Vec<(String, &metrics::MetricsReport)> = self
            .rows
            .iter()
            .map(|r| {
                let name = match r.mode {
                    AblationMode::Full => "DuCN".to_string(),
                    m => format!("DuCN-{m}"),
                };
                (name, &r.evaluation.slice)
            })
            .collect();
        metrics::format_table(&rows)
    }
}

/// Trains and evaluates every ablation mode for `ablate_epochs` epochs, with
/// the same segmentation, split and seed.
pub fn ablate(config: &RunConfig, ws: &Workspace) -> Result<AblationGrid> {
    let manifest = ws.split_manifest()?;
    let (channels, seg_hash) = segment_manifest(ws, &manifest)?;
    let train_records = manifest.records_in(Partition::Train);
    let test_records = manifest.records_in(Partition::Test);
    let mut rows = Vec::with_capacity(AblationMode::ALL.len());
    for mode in AblationMode::ALL {
        write_stacks(ws, &manifest, &channels, &seg_hash, mode)?;
        let run_dir = ws.ablate_dir().join("runs").join(mode.as_str());
        let train_stacks = load_stacks(ws, &manifest, mode, &train_records)?;
        let report = train_on(config, &manifest, mode, config.ablate_epochs, &run_dir, train_stacks, &train_records)?;
        let (model, _) = load_model(&run_dir, &manifest, false)?;
        let test_stacks = load_stacks(ws, &manifest, mode, &test_records)?;
        let eval = evaluate_model(&model, mode, &test_records, &test_stacks)?;
        log::info!("ablation {mode}: accuracy {}", metrics::format_percent(eval.evaluation.slice.accuracy));
        rows.push(AblationRow {
            mode,
            epochs: config.ablate_epochs,
            init: report.init,
            init_param_hash: report.init_param_hash,
            data_hash: report.data_hash,
            final_loss: report.history.last().map_or(f64::NAN, |h| h.loss.l_total),
            evaluation: eval.evaluation,
        });
    }
    let grid = AblationGrid { rows };
    fsutil::write_json(&ws.ablate_dir().join("grid.json"), &grid)?;
    fsutil::write_atomic(&ws.ablate_dir().join("grid.txt"), grid.render().as_bytes())?;
    Ok(grid)
}

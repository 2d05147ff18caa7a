//! Synthetic chest-CT slices with known lung masks, the dataset manifest,
//! augmentation, class balancing and the patient-level split.
//!
//! Each patient gets a torso ellipse (intensity 0.30) containing two lung
//! ellipses (0.05). Class signatures live inside the lungs: NCP slices carry
//! 2–4 small peripheral blobs, CP slices one larger central blob, Normal
//! slices nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edt;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::image::{Image, Mask};
use crate::ntf;
use crate::rng::{stream_rng, streams};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPLIT_FILE: &str = "split.json";

const TORSO_INTENSITY: f32 = 0.30;
const LUNG_INTENSITY: f32 = 0.05;
const NOISE_SIGMA: f32 = 0.02;
const NCP_MAX_BOUNDARY_DISTANCE: f32 = 0.35;
const CP_MIN_BOUNDARY_DISTANCE: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    NCP,
    CP,
    Normal,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::NCP, ClassLabel::CP, ClassLabel::Normal];

    /// Detection target: NCP is the positive class.
    pub fn target(self) -> u8 {
        u8::from(self == ClassLabel::NCP)
    }

    fn slug(self) -> &'static str {
        match self {
            ClassLabel::NCP => "ncp",
            ClassLabel::CP => "cp",
            ClassLabel::Normal => "normal",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ClassLabel::NCP => "NCP",
            ClassLabel::CP => "CP",
            ClassLabel::Normal => "Normal",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub num_patients_per_class: usize,
    pub slices_per_patient: usize,
    pub image_size: usize,
    pub lesion_intensity_range: (f32, f32),
    pub jitter_fraction: f32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_patients_per_class: 100,
            slices_per_patient: 2,
            image_size: 64,
            lesion_intensity_range: (0.35, 0.65),
            jitter_fraction: 0.1,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || self.image_size % 2 != 0 {
            return Err(Error::Config(format!(
                "image_size must be even and at least 32, got {}",
                self.image_size
            )));
        }
        if self.num_patients_per_class == 0 || self.slices_per_patient == 0 {
            return Err(Error::Config("need at least one patient per class and one slice".into()));
        }
        let (lo, hi) = self.lesion_intensity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("bad lesion_intensity_range ({lo}, {hi})")));
        }
        if !(0.0..=0.2).contains(&self.jitter_fraction) {
            return Err(Error::Config(format!(
                "jitter_fraction must lie in [0, 0.2], got {}",
                self.jitter_fraction
            )));
        }
        Ok(())
    }
}

/// Generator metadata for one rendered lesion (pixel coordinates).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionBlob {
    pub row: f32,
    pub col: f32,
    pub radius: f32,
    pub intensity: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub patient_id: String,
    pub scan_id: String,
    pub slice_id: String,
    pub label: ClassLabel,
    /// Relative to the dataset root.
    pub image_path: String,
    pub mask_path: String,
    #[serde(default)]
    pub augmented_from: Option<String>,
    #[serde(default)]
    pub lesions: Vec<LesionBlob>,
}

impl SliceRecord {
    /// `patient/scan/slice`, unique within a manifest.
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.patient_id, self.scan_id, self.slice_id)
    }

    /// `patient_scan_slice`, used for the slice's file names.
    pub fn file_stem(&self) -> String {
        format!("{}_{}_{}", self.patient_id, self.scan_id, self.slice_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<SliceRecord>,
    pub split: Option<BTreeMap<String, Partition>>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fsutil::read_to_string(&path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: SliceRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
            records.push(record);
        }
        let split_path = root.join(SPLIT_FILE);
        let split = if split_path.exists() {
            Some(fsutil::read_json(&split_path)?)
        } else {
            None
        };
        let manifest = Self {
            root: root.to_path_buf(),
            records,
            split,
        };
        manifest.check_unique()?;
        Ok(manifest)
    }

    fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for record in &self.records {
            out.extend(serde_json::to_vec(record)?);
            out.push(b'\n');
        }
        Ok(out)
    }

    fn split_bytes(&self) -> Result<Option<Vec<u8>>> {
        self.split
            .as_ref()
            .map(|s| {
                let mut bytes = serde_json::to_vec_pretty(s)?;
                bytes.push(b'\n');
                Ok(bytes)
            })
            .transpose()
    }

    pub fn save(&self) -> Result<()> {
        self.check_unique()?;
        fsutil::write_atomic(&self.root.join(MANIFEST_FILE), &self.manifest_bytes()?)?;
        let split_path = self.root.join(SPLIT_FILE);
        match self.split_bytes()? {
            Some(bytes) => fsutil::write_atomic(&split_path, &bytes)?,
            None if split_path.exists() => {
                std::fs::remove_file(&split_path).map_err(|e| Error::io(&split_path, e))?
            }
            None => {}
        }
        Ok(())
    }

    /// SHA-256 over the serialized records and split assignment.
    pub fn content_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.manifest_bytes()?);
        hasher.update([0u8]);
        if let Some(split) = self.split_bytes()? {
            hasher.update(split);
        }
        Ok(hex::encode(hasher.finalize()))
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.key()) {
                return Err(Error::Data(format!("duplicate slice identity {}", r.key())));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn load_image(&self, record: &SliceRecord) -> Result<Image> {
        ntf::read_image(&self.resolve(&record.image_path))
    }

    pub fn load_mask(&self, record: &SliceRecord) -> Result<Mask> {
        ntf::read_mask(&self.resolve(&record.mask_path))
    }

    pub fn partition_of(&self, record: &SliceRecord) -> Option<Partition> {
        self.split.as_ref().and_then(|s| s.get(&record.patient_id).copied())
    }

    pub fn records_in(&self, partition: Partition) -> Vec<&SliceRecord> {
        self.records
            .iter()
            .filter(|r| self.partition_of(r) == Some(partition))
            .collect()
    }

    /// Slice counts per class, optionally restricted to one partition.
    pub fn class_counts(&self, partition: Option<Partition>) -> BTreeMap<ClassLabel, usize> {
        let mut counts: BTreeMap<ClassLabel, usize> = BTreeMap::new();
        for r in &self.records {
            if partition.is_none() || self.partition_of(r) == partition {
                *counts.entry(r.label).or_default() += 1;
            }
        }
        counts
    }

    /// Patients grouped by class, each list sorted.
    pub fn patients_by_class(&self) -> Result<BTreeMap<ClassLabel, Vec<String>>> {
        let mut label_of: BTreeMap<&str, ClassLabel> = BTreeMap::new();
        for r in &self.records {
            match label_of.insert(&r.patient_id, r.label) {
                Some(prev) if prev != r.label => {
                    return Err(Error::Data(format!(
                        "patient {} has slices labelled {prev} and {}",
                        r.patient_id, r.label
                    )))
                }
                _ => {}
            }
        }
        let mut out: BTreeMap<ClassLabel, Vec<String>> = BTreeMap::new();
        for (patient, label) in label_of {
            out.entry(label).or_default().push(patient.to_string());
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
}

impl Ellipse {
    fn contains(&self, row: usize, col: usize) -> bool {
        let y = (row as f32 + 0.5 - self.cy) / self.ry;
        let x = (col as f32 + 0.5 - self.cx) / self.rx;
        x * x + y * y <= 1.0
    }
}

struct PatientGeometry {
    torso: Ellipse,
    lungs: [Ellipse; 2],
}

impl PatientGeometry {
    fn sample<R: Rng>(rng: &mut R, size: usize, jitter: f32) -> Self {
        let s = size as f32;
        let mut j = |v: f32| v * (1.0 + jitter * rng.random_range(-1.0f32..=1.0));
        let torso = Ellipse {
            cy: j(0.50) * s,
            cx: 0.5 * s,
            ry: j(0.36) * s,
            rx: j(0.46) * s,
        };
        let offset = j(0.19) * s;
        let lung_cy = j(0.5) * s;
        let ry = j(0.20) * s;
        let rx = j(0.11) * s;
        let lungs = [
            Ellipse {
                cy: lung_cy,
                cx: 0.5 * s - offset,
                ry,
                rx,
            },
            Ellipse {
                cy: lung_cy,
                cx: 0.5 * s + offset,
                ry: j(0.20) * s,
                rx: j(0.11) * s,
            },
        ];
        Self { torso, lungs }
    }

    fn lung_mask(&self, size: usize, which: usize) -> Mask {
        let mut m = Mask::zeros(size, size);
        for r in 0..size {
            for c in 0..size {
                if self.lungs[which].contains(r, c) {
                    m.set(r, c, 1);
                }
            }
        }
        m
    }
}

fn render_blob(image: &mut Image, mask: &Mask, blob: &LesionBlob) {
    let r0 = (blob.row - blob.radius).floor().max(0.0) as usize;
    let r1 = ((blob.row + blob.radius).ceil() as usize).min(image.height - 1);
    let c0 = (blob.col - blob.radius).floor().max(0.0) as usize;
    let c1 = ((blob.col + blob.radius).ceil() as usize).min(image.width - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if mask.get(r, c) == 0 {
                continue;
            }
            let d2 = (r as f32 - blob.row).powi(2) + (c as f32 - blob.col).powi(2);
            let t = d2 / (blob.radius * blob.radius);
            if t <= 1.0 {
                let v = LUNG_INTENSITY + (blob.intensity - LUNG_INTENSITY) * (1.0 - t * t);
                image.set(r, c, image.get(r, c).max(v));
            }
        }
    }
}

/// Candidate lesion centres: pixels of one lung whose boundary distance,
/// normalized by that lung's maximum, satisfies `keep`.
fn candidates(lung: &Mask, keep: impl Fn(f32) -> bool) -> Vec<(usize, usize)> {
    let map = edt::normalize_map(&edt::intrapulmonary_edt(lung).expect("lung masks are binary"));
    let mut out = Vec::new();
    for r in 0..lung.height {
        for c in 0..lung.width {
            let d = map.get(r, c);
            if d > 0.0 && keep(d) {
                out.push((r, c));
            }
        }
    }
    out
}

struct RenderedSlice {
    image: Image,
    lesions: Vec<LesionBlob>,
}

fn render_patient(config: &PhantomConfig, label: ClassLabel, patient_index: usize) -> (Mask, Vec<RenderedSlice>) {
    let size = config.image_size;
    let s = size as f32;
    let mut rng = stream_rng(config.seed, streams::PATIENT_BASE + patient_index as u64);
    let geometry = PatientGeometry::sample(&mut rng, size, config.jitter_fraction);
    let lung_masks = [geometry.lung_mask(size, 0), geometry.lung_mask(size, 1)];
    let mut mask = Mask::zeros(size, size);
    let mut base = Image::zeros(size, size);
    for r in 0..size {
        for c in 0..size {
            if geometry.torso.contains(r, c) {
                base.set(r, c, TORSO_INTENSITY);
            }
            if lung_masks[0].get(r, c) == 1 || lung_masks[1].get(r, c) == 1 {
                mask.set(r, c, 1);
                base.set(r, c, LUNG_INTENSITY);
            }
        }
    }
    let peripheral = [
        candidates(&lung_masks[0], |d| d < NCP_MAX_BOUNDARY_DISTANCE),
        candidates(&lung_masks[1], |d| d < NCP_MAX_BOUNDARY_DISTANCE),
    ];
    let central = [
        candidates(&lung_masks[0], |d| d > CP_MIN_BOUNDARY_DISTANCE),
        candidates(&lung_masks[1], |d| d > CP_MIN_BOUNDARY_DISTANCE),
    ];
    let (lo, hi) = config.lesion_intensity_range;
    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("positive sigma");

    let mut slices = Vec::with_capacity(config.slices_per_patient);
    for _ in 0..config.slices_per_patient {
        let mut image = base.clone();
        let mut lesions = Vec::new();
        let (count, pool, radius_range) = match label {
            ClassLabel::NCP => (rng.random_range(2..=4), &peripheral, (0.05 * s, 0.065 * s)),
            ClassLabel::CP => (1, &central, (0.07 * s, 0.09 * s)),
            ClassLabel::Normal => (0, &peripheral, (0.0, 0.0)),
        };
        for _ in 0..count {
            let side = rng.random_range(0..2);
            let (row, col) = pool[side][rng.random_range(0..pool[side].len())];
            let blob = LesionBlob {
                row: row as f32,
                col: col as f32,
                radius: rng.random_range(radius_range.0..=radius_range.1),
                intensity: if lo < hi { rng.random_range(lo..=hi) } else { lo },
            };
            render_blob(&mut image, &mask, &blob);
            lesions.push(blob);
        }
        for v in image.data.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        slices.push(RenderedSlice { image, lesions });
    }
    (mask, slices)
}

/// Renders the whole dataset under `out_dir` and writes its manifest.
pub fn generate_dataset(config: &PhantomConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fsutil::create_dir_all(&out_dir.join("images"))?;
    fsutil::create_dir_all(&out_dir.join("masks"))?;

    let patients: Vec<(ClassLabel, usize, usize)> = ClassLabel::ALL
        .iter()
        .enumerate()
        .flat_map(|(ci, &label)| {
            (0..config.num_patients_per_class)
                .map(move |i| (label, i, ci * config.num_patients_per_class + i))
        })
        .collect();

    let per_patient: Vec<Result<Vec<SliceRecord>>> = patients
        .par_iter()
        .map(|&(label, local, global)| {
            let (mask, slices) = render_patient(config, label, global);
            let patient_id = format!("{}-{local:03}", label.slug());
            let mut records = Vec::with_capacity(slices.len());
            for (z, slice) in slices.into_iter().enumerate() {
                let mut record = SliceRecord {
                    patient_id: patient_id.clone(),
                    scan_id: "scan0".into(),
                    slice_id: format!("z{z:02}"),
                    label,
                    image_path: String::new(),
                    mask_path: String::new(),
                    augmented_from: None,
                    lesions: slice.lesions,
                };
                record.image_path = format!("images/{}.ntf", record.file_stem());
                record.mask_path = format!("masks/{}.ntf", record.file_stem());
                ntf::write_image(&out_dir.join(&record.image_path), &slice.image)?;
                ntf::write_mask(&out_dir.join(&record.mask_path), &mask)?;
                records.push(record);
            }
            Ok(records)
        })
        .collect();

    let mut records = Vec::new();
    for r in per_patient {
        records.extend(r?);
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
        split: None,
    };
    manifest.save()?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    FlipLr,
    /// Degrees, counter-clockwise, within ±2.
    Rotate(f32),
}

impl Augmentation {
    fn tag(self) -> String {
        match self {
            Augmentation::FlipLr => "flip".into(),
            Augmentation::Rotate(a) => format!("rot{a:+.2}"),
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Augmentation::Rotate(a) if !(a.abs() <= 2.0) => Err(Error::Domain(format!(
                "rotation angle must lie within ±2 degrees, got {a}"
            ))),
            _ => Ok(()),
        }
    }
}

pub fn flip_image(image: &Image) -> Image {
    let mut out = Image::zeros(image.height, image.width);
    for r in 0..image.height {
        for c in 0..image.width {
            out.set(r, c, image.get(r, image.width - 1 - c));
        }
    }
    out
}

pub fn flip_mask(mask: &Mask) -> Mask {
    let mut out = Mask::zeros(mask.height, mask.width);
    for r in 0..mask.height {
        for c in 0..mask.width {
            out.set(r, c, mask.get(r, mask.width - 1 - c));
        }
    }
    out
}

/// Source coordinate sampled by output pixel `(r, c)` under a rotation by
/// `degrees` about the image centre.
fn rotation_source(r: usize, c: usize, h: usize, w: usize, degrees: f32) -> (f32, f32) {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let y = r as f32 - cy;
    let x = c as f32 - cx;
    (cy + cos * y - sin * x, cx + sin * y + cos * x)
}

/// Bilinear rotation with zero fill outside the image.
pub fn rotate_image(image: &Image, degrees: f32) -> Image {
    let (h, w) = (image.height, image.width);
    let sample = |r: isize, c: isize| -> f32 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            image.get(r as usize, c as usize)
        }
    };
    let mut out = Image::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = rotation_source(r, c, h, w, degrees);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = sample(y0, x0) * (1.0 - fx) + sample(y0, x0 + 1) * fx;
            let bottom = sample(y0 + 1, x0) * (1.0 - fx) + sample(y0 + 1, x0 + 1) * fx;
            out.set(r, c, (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    out
}

/// Nearest-neighbour rotation followed by a 0.5 threshold.
pub fn rotate_mask(mask: &Mask, degrees: f32) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut out = Mask::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = rotation_source(r, c, h, w, degrees);
            let (y, x) = (sy.round(), sx.round());
            if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                let v = f32::from(mask.get(y as usize, x as usize));
                out.set(r, c, u8::from(v >= 0.5));
            }
        }
    }
    out
}

/// Applies one augmentation to a stored slice, writing the new image and mask
/// next to the dataset's other files.
pub fn augment_slice(manifest_root: &Path, record: &SliceRecord, aug: Augmentation) -> Result<SliceRecord> {
    aug.validate()?;
    let image = ntf::read_image(&manifest_root.join(&record.image_path))?;
    let mask = ntf::read_mask(&manifest_root.join(&record.mask_path))?;
    let (h, w) = (image.height as f32, image.width as f32);
    let (new_image, new_mask, lesions) = match aug {
        Augmentation::FlipLr => (
            flip_image(&image),
            flip_mask(&mask),
            record
                .lesions
                .iter()
                .map(|b| LesionBlob {
                    col: w - 1.0 - b.col,
                    ..b.clone()
                })
                .collect(),
        ),
        Augmentation::Rotate(deg) => {
            let (sin, cos) = deg.to_radians().sin_cos();
            let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
            (
                rotate_image(&image, deg),
                rotate_mask(&mask, deg),
                record
                    .lesions
                    .iter()
                    .map(|b| {
                        // Forward map of the inverse used in `rotation_source`.
                        let (y, x) = (b.row - cy, b.col - cx);
                        LesionBlob {
                            row: cy + cos * y + sin * x,
                            col: cx - sin * y + cos * x,
                            ..b.clone()
                        }
                    })
                    .collect(),
            )
        }
    };
    let mut out = SliceRecord {
        slice_id: format!("{}~{}", record.slice_id, aug.tag()),
        augmented_from: Some(record.slice_id.clone()),
        lesions,
        ..record.clone()
    };
    out.image_path = format!("images/{}.ntf", out.file_stem());
    out.mask_path = format!("masks/{}.ntf", out.file_stem());
    ntf::write_image(&manifest_root.join(&out.image_path), &new_image)?;
    ntf::write_mask(&manifest_root.join(&out.mask_path), &new_mask)?;
    Ok(out)
}

/// Augmentation used in balancing round `round`: a flip first, then
/// rotations of +2°, −2°, +1°, −1°, +2/3°, ...
pub fn balancing_augmentation(round: usize) -> Augmentation {
    if round == 0 {
        return Augmentation::FlipLr;
    }
    let sign = if round % 2 == 1 { 1.0 } else { -1.0 };
    Augmentation::Rotate(sign * 2.0 / round.div_ceil(2) as f32)
}

/// Adds augmented copies of `target` slices until its count equals the
/// largest other class. When a split exists only the train partition is
/// counted and augmented.
pub fn balance_by_augmentation(manifest: &DatasetManifest, target: ClassLabel) -> Result<DatasetManifest> {
    let scope = manifest.split.as_ref().map(|_| Partition::Train);
    let counts = manifest.class_counts(scope);
    let max_other = counts
        .iter()
        .filter(|(l, _)| **l != target)
        .map(|(_, &c)| c)
        .max()
        .unwrap_or(0);
    let mut have = counts.get(&target).copied().unwrap_or(0);
    let mut out = manifest.clone();
    if have >= max_other {
        return Ok(out);
    }
    let sources: Vec<&SliceRecord> = manifest
        .records
        .iter()
        .filter(|r| {
            r.label == target
                && r.augmented_from.is_none()
                && (scope.is_none() || manifest.partition_of(r) == scope)
        })
        .collect();
    if sources.is_empty() {
        return Err(Error::Data(format!("no {target} slices available to augment")));
    }
    let mut round = 0;
    while have < max_other {
        let aug = balancing_augmentation(round);
        for source in &sources {
            if have == max_other {
                break;
            }
            out.records.push(augment_slice(&manifest.root, source, aug)?);
            have += 1;
        }
        round += 1;
    }
    Ok(out)
}

/// Stratified patient-level split: within each class, patients are shuffled
/// and the first `round(train_fraction · P)` go to train.
pub fn split_by_patient(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut assignment = BTreeMap::new();
    for (label, mut patients) in manifest.patients_by_class()? {
        if patients.len() < 2 {
            return Err(Error::Split(format!(
                "class {label} has {} patient(s); need at least 2 to populate both partitions",
                patients.len()
            )));
        }
        let class_index = ClassLabel::ALL.iter().position(|&l| l == label).unwrap_or(0) as u64;
        let mut rng = stream_rng(seed, streams::SPLIT + class_index);
        patients.shuffle(&mut rng);
        let n = patients.len();
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        for (i, p) in patients.into_iter().enumerate() {
            assignment.insert(p, if i < n_train { Partition::Train } else { Partition::Test });
        }
    }
    Ok(DatasetManifest {
        split: Some(assignment),
        ..manifest.clone()
    })
}

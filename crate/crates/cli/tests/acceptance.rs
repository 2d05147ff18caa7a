//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 7, 8, 9 and 11 train real models on phantom data and take tens
//! of minutes on a single core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ducn_core::caseindex::{top_k, CaseId, EmbeddingIndex, IndexEntry, IndexScope};
use ducn_core::checkpoint::param_hash;
use ducn_core::ducn::{
    build_ducn, cross_entropy, cross_entropy_with_grad, element_loss, euclidean_distance, l2_normalize,
    load_checkpoint, save_checkpoint, triplet_loss, triplet_loss_with_grad, batch_gradients, ClassifierView,
    DuCNConfig, HeadKind, Init, LossBreakdown, LossWeights, SliceMeta, TrainingSet,
};
use ducn_core::edt::{normalize_map, squared_edt};
use ducn_core::metrics::{self, auc_pairwise, auc_trapezoid, compute_metrics, format_percent, ConfusionCounts};
use ducn_core::nn::{Adam, Parameterized};
use ducn_core::ntf::{self, NtfData, NtfTensor};
use ducn_core::phantom::{generate_dataset, split_by_patient, Partition};
use ducn_core::pipeline::{self, RunConfig, Workspace};
use ducn_core::segnet::{dice_loss, dice_loss_with_grad};
use ducn_core::{AblationMode, ClassLabel, DatasetManifest, Error, InputStack, Mask, PhantomConfig, Tensor};

const BIN: &str = env!("CARGO_BIN_EXE_ducn");
const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("{what} took {took:.1?}, limit {limit:?}"))
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Central differences of `f` at `x` in f64 around an f32-representable point.
fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn direct_triplet(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    let d = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    (d(a, p) - d(a, n) + margin).max(0.0)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut active, mut clamped) = (0, 0);
    for i in 0..1000 {
        let dim = rng.random_range(2..=128);
        let a = random_vec(&mut rng, dim, -1.0, 1.0);
        let p = random_vec(&mut rng, dim, -1.0, 1.0);
        // Every other triple pushes the negative far away so the hinge clamps.
        let spread = if i % 2 == 0 { 1.0 } else { 20.0 };
        let n = random_vec(&mut rng, dim, -spread, spread);
        let expected = direct_triplet(&a, &p, &n, 1.2);
        let got = triplet_loss(&a, &p, &n, 1.2).map_err(|e| e.to_string())?;
        ensure((got - expected).abs() <= 1e-6, || format!("triple {i}: {got} vs {expected}"))?;
        if expected > 0.0 {
            active += 1;
        } else {
            clamped += 1;
        }
    }
    ensure(active > 100 && clamped > 100, || format!("{active} active, {clamped} clamped"))?;
    let eq = triplet_loss(&[0.0f32, 0.0], &[1.0, 0.0], &[0.0, 1.0], 1.2).map_err(|e| e.to_string())?;
    ensure(eq == 1.2, || format!("equidistant case gave {eq}"))?;
    within(start, Duration::from_secs(5), "criterion 1")?;
    Ok(format!("1000 triples ({active} hinge-active, {clamped} clamped), equidistant = 1.2"))
}

fn criterion_2() -> Outcome {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (t, ce, scr) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let b = LossBreakdown::compose(t, ce, scr, &w);
        let l_d = 0.4 * t + 0.6 * ce;
        ensure((b.l_d - l_d).abs() <= 1e-9, || format!("L_D {} vs {l_d}", b.l_d))?;
        let total = 0.3 * l_d + 0.7 * scr;
        ensure((b.l_total - total).abs() <= 1e-9, || format!("L_total {} vs {total}", b.l_total))?;
    }
    Ok("100 samples".into())
}

/// Distance from the triplet hinge corner on L2-normalized embeddings.
fn hinge_gap(z: &[f64], dim: usize, normalize: bool) -> f64 {
    let m: Vec<Vec<f64>> = z
        .chunks(dim)
        .map(|c| if normalize { l2_normalize(c).0 } else { c.to_vec() })
        .collect();
    let d = |u: &[f64], v: &[f64]| euclidean_distance(u, v).expect("same dims");
    (d(&m[0], &m[1]) - d(&m[0], &m[2]) + 1.2).abs().min(d(&m[0], &m[1])).min(d(&m[0], &m[2]))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tol = 1e-3;
    let h = 1e-4;
    let mut worst = [0.0f64; 4];

    let mut checked = 0;
    while checked < 100 {
        let dim = rng.random_range(2..=16);
        let x = to_f64(&to_f32(&random_vec(&mut rng, 3 * dim, -1.0, 1.0)));
        if hinge_gap(&x, dim, false) < 1e-2 {
            continue;
        }
        let x32 = to_f32(&x);
        let (_, g) = triplet_loss_with_grad(&x32[..dim], &x32[dim..2 * dim], &x32[2 * dim..], 1.2f32)
            .map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = g.iter().flat_map(|v| to_f64(v)).collect();
        let numeric = numeric_grad(&x, h, |x| {
            triplet_loss(&x[..dim], &x[dim..2 * dim], &x[2 * dim..], 1.2).expect("same dims")
        });
        worst[0] = worst[0].max(relative_error(&analytic, &numeric));
        checked += 1;
    }

    for _ in 0..100 {
        let x = to_f64(&to_f32(&random_vec(&mut rng, 2, -5.0, 5.0)));
        let label = rng.random_range(0..2);
        let (_, g) = cross_entropy_with_grad(&to_f32(&x), label);
        let numeric = numeric_grad(&x, h, |x| cross_entropy(x, label));
        worst[1] = worst[1].max(relative_error(&to_f64(&g), &numeric));
    }

    for _ in 0..100 {
        let p = to_f64(&to_f32(&random_vec(&mut rng, 64, 0.01, 0.99)));
        let t: Vec<f64> = (0..64).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let (_, g) = dice_loss_with_grad(&to_f32(&p), &to_f32(&t)).map_err(|e| e.to_string())?;
        let numeric = numeric_grad(&p, h, |p| dice_loss(p, &t).expect("same length"));
        worst[2] = worst[2].max(relative_error(&to_f64(&g), &numeric));
    }

    let w = LossWeights::default();
    let dim = 8;
    let mut checked = 0;
    while checked < 100 {
        let x = to_f64(&to_f32(&random_vec(&mut rng, 8 * dim + 2, -1.0, 1.0)));
        if hinge_gap(&x[..3 * dim], dim, true) < 1e-2 || hinge_gap(&x[3 * dim..6 * dim], dim, true) < 1e-2 {
            continue;
        }
        let eval = |x: &[f64]| {
            let z: Vec<&[f64]> = x[..6 * dim].chunks(dim).collect();
            let view = ClassifierView {
                weight: &x[6 * dim..8 * dim],
                bias: &x[8 * dim..],
            };
            element_loss([z[0], z[1], z[2]], [z[3], z[4], z[5]], view, &w).expect("dims agree").0.l_total
        };
        let x32 = to_f32(&x);
        let z: Vec<&[f32]> = x32[..6 * dim].chunks(dim).collect();
        let view = ClassifierView {
            weight: &x32[6 * dim..8 * dim],
            bias: &x32[8 * dim..],
        };
        let (_, g) = element_loss([z[0], z[1], z[2]], [z[3], z[4], z[5]], view, &w).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = g
            .det_raw
            .iter()
            .chain(&g.rec_raw)
            .flatten()
            .chain(&g.classifier_weight)
            .chain(&g.classifier_bias)
            .map(|&v| f64::from(v))
            .collect();
        worst[3] = worst[3].max(relative_error(&analytic, &numeric_grad(&x, h, eval)));
        checked += 1;
    }

    let names = ["triplet", "cross-entropy", "dice", "total"];
    for (name, err) in names.iter().zip(worst) {
        ensure(err < tol, || format!("{name} gradient relative error {err:.2e}"))?;
    }
    within(start, Duration::from_secs(60), "criterion 3")?;
    Ok(format!(
        "worst relative errors: triplet {:.1e}, CE {:.1e}, Dice {:.1e}, total {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

fn random_mask(rng: &mut ChaCha8Rng, size: usize) -> Mask {
    let density = rng.random_range(0.3..0.95);
    Mask::from_vec(size, size, (0..size * size).map(|_| u8::from(rng.random_bool(density))).collect())
        .expect("binary")
}

/// Squared distance to the nearest background pixel, where the one-pixel
/// ring around the image counts as background.
fn brute_force_edt(mask: &Mask) -> Vec<u32> {
    let (h, w) = (mask.height as i64, mask.width as i64);
    let mut background = Vec::new();
    for r in -1..=h {
        for c in -1..=w {
            let inside = (0..h).contains(&r) && (0..w).contains(&c);
            if !inside || mask.get(r as usize, c as usize) == 0 {
                background.push((r, c));
            }
        }
    }
    let mut out = Vec::with_capacity((h * w) as usize);
    for r in 0..h {
        for c in 0..w {
            let d = if mask.get(r as usize, c as usize) == 0 {
                0
            } else {
                background.iter().map(|&(br, bc)| (br - r).pow(2) + (bc - c).pow(2)).min().unwrap_or(0)
            };
            out.push(d as u32);
        }
    }
    out
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..200 {
        let mask = random_mask(&mut rng, 32);
        let got = squared_edt(&mask).map_err(|e| e.to_string())?;
        ensure(got.data == brute_force_edt(&mask), || format!("mask {i} differs from brute force"))?;
    }
    for i in 0..50 {
        let mask = random_mask(&mut rng, 32);
        let d: Vec<f64> = squared_edt(&mask).map_err(|e| e.to_string())?.data.iter().map(|&v| f64::from(v).sqrt()).collect();
        for r in 0..32 {
            for c in 0..32 {
                let here = d[r * 32 + c];
                if c + 1 < 32 {
                    ensure((here - d[r * 32 + c + 1]).abs() <= 1.0, || format!("mask {i}: not 1-Lipschitz"))?;
                }
                if r + 1 < 32 {
                    ensure((here - d[(r + 1) * 32 + c]).abs() <= 1.0, || format!("mask {i}: not 1-Lipschitz"))?;
                }
            }
        }
        let direct = squared_edt(&mask).map_err(|e| e.to_string())?;
        let transposed = squared_edt(&mask.transpose()).map_err(|e| e.to_string())?;
        let mirrored = (0..32).all(|r| (0..32).all(|c| transposed.data[c * 32 + r] == direct.data[r * 32 + c]));
        ensure(mirrored, || format!("mask {i}: transpose changes distances"))?;
    }
    within(start, Duration::from_secs(60), "criterion 4")?;
    Ok("200 masks equal brute force; Lipschitz and transpose hold on 50".into())
}

fn random_stack(rng: &mut ChaCha8Rng, size: usize, label: ClassLabel) -> InputStack {
    let data = (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
    InputStack {
        channels: Tensor::new(vec![3, size, size], data).expect("shape"),
        mode: AblationMode::Full,
        source: String::new(),
        label: Some(label),
    }
}

fn perturbed(model: &ducn_core::DuCNModel, prefix: &str, scale: f32, seed: u64) -> ducn_core::DuCNModel {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in m.named_params_mut() {
        if name.starts_with(prefix) {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
        }
    }
    m
}

fn criterion_5() -> Outcome {
    let err = |e: Error| e.to_string();
    let model = build_ducn(&DuCNConfig::default(), &Init::PretrainedStub, 5).map_err(err)?;
    let model = perturbed(&model, "", 0.02, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stacks: Vec<InputStack> = (0..4).map(|_| random_stack(&mut rng, 64, ClassLabel::NCP)).collect();
    let refs: Vec<&InputStack> = stacks.iter().collect();

    let det = model.embed(HeadKind::Detection, &refs).map_err(err)?;
    let rec = model.embed(HeadKind::Recommendation, &refs).map_err(err)?;
    let worst = det
        .iter()
        .chain(&rec)
        .map(|e| (e.iter().map(|v| v * v).sum::<f32>().sqrt() - 1.0).abs())
        .fold(0.0f32, f32::max);
    ensure(worst <= 1e-4, || format!("embedding norm deviates by {worst}"))?;

    let m = perturbed(&model, "recommendation.", 0.05, 2);
    ensure(m.embed(HeadKind::Detection, &refs).map_err(err)? == det, || "recommendation head changed detection".into())?;
    let m = perturbed(&perturbed(&model, "detection.", 0.05, 3), "classifier.", 0.05, 4);
    ensure(m.embed(HeadKind::Recommendation, &refs).map_err(err)? == rec, || "detection head changed recommendation".into())?;

    let config = DuCNConfig {
        width_factor: 0.125,
        embedding_dim: 16,
        image_size: 32,
        in_channels: 3,
    };
    let small = perturbed(&build_ducn(&config, &Init::SeededRandom, 8).map_err(err)?, "", 0.05, 3);
    let mut meta = Vec::new();
    let mut small_stacks = Vec::new();
    for (label, patients) in [(ClassLabel::NCP, 3), (ClassLabel::CP, 2), (ClassLabel::Normal, 2)] {
        for p in 0..patients {
            for s in 0..3 {
                meta.push(SliceMeta {
                    patient_id: format!("{label}-{p}"),
                    base_slice: format!("z{s}"),
                    label,
                });
                small_stacks.push(random_stack(&mut rng, 32, label));
            }
        }
    }
    let set = TrainingSet::new(small_stacks, meta).map_err(err)?;
    let (det_t, rec_t) = set.sample_batch(&mut rng, 3).map_err(err)?;
    let grads = |w: LossWeights| batch_gradients(&small, &set, &det_t, &rec_t, &w, true).map(|g| g.0);
    let total = grads(LossWeights::default()).map_err(err)?;
    let only_d = grads(LossWeights { total_d: 1.0, total_scr: 0.0, ..LossWeights::default() }).map_err(err)?;
    let only_scr = grads(LossWeights { total_d: 0.0, total_scr: 1.0, ..LossWeights::default() }).map_err(err)?;
    let mut worst_add = 0.0f32;
    for (((name, t), (_, d)), (_, s)) in total.named_params().into_iter().zip(only_d.named_params()).zip(only_scr.named_params()) {
        if name.starts_with("trunk.") {
            for ((&g, &gd), &gs) in t.data().iter().zip(d.data()).zip(s.data()) {
                worst_add = worst_add.max((g - (0.3 * gd + 0.7 * gs)).abs());
            }
        }
    }
    ensure(worst_add <= 1e-5, || format!("trunk gradient additivity off by {worst_add}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = small_dataset(dir.path(), 2, 1, 32)?;
    let record = &manifest.records[0];
    let raw = manifest.load_image(record).map_err(err)?;
    let mask = manifest.load_mask(record).map_err(err)?;
    let dmap = normalize_map(&ducn_core::edt::intrapulmonary_edt(&mask).map_err(err)?);
    let stack = |mode| ducn_core::ducn::compose_input_stack(&raw, &mask, &dmap, mode, String::new(), None);
    let full = stack(AblationMode::Full).map_err(err)?;
    let lung: Vec<f32> = raw.data.iter().zip(&mask.data).map(|(&v, &m)| if m == 1 { v } else { 0.0 }).collect();
    ensure(full.channel(0) == &lung[..] && full.channel(1) == &raw.data[..] && full.channel(2) == &dmap.values[..], || {
        "full stack is not (lung, raw, distance)".into()
    })?;
    let expected: [(AblationMode, [&[f32]; 3]); 4] = [
        (AblationMode::Lmr, [&raw.data, &raw.data, &raw.data]),
        (AblationMode::Dmr, [&lung, &raw.data, &lung]),
        (AblationMode::Rir, [&lung, &lung, &dmap.values]),
        (AblationMode::Up, [&lung, &raw.data, &dmap.values]),
    ];
    for (mode, planes) in expected {
        let s = stack(mode).map_err(err)?;
        ensure((0..3).all(|c| s.channel(c) == planes[c]), || format!("{mode} channels are not bit-exact"))?;
    }
    Ok(format!("norm deviation {worst:.1e}, heads isolated, additivity {worst_add:.1e}, 5 modes bit-exact"))
}

fn small_dataset(dir: &Path, patients: usize, slices: usize, size: usize) -> Result<DatasetManifest, String> {
    let config = PhantomConfig {
        seed: 11,
        num_patients_per_class: patients,
        slices_per_patient: slices,
        image_size: size,
        ..PhantomConfig::default()
    };
    generate_dataset(&config, dir).map_err(|e| e.to_string())
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = small_dataset(dir.path(), 12, 1, 32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..100u64 {
        let mut subset = manifest.clone();
        let keep: Vec<(ClassLabel, usize)> = ClassLabel::ALL.iter().map(|&l| (l, rng.random_range(2..=12))).collect();
        subset.records.retain(|r| {
            let index: usize = r.patient_id.rsplit('-').next().and_then(|n| n.parse().ok()).unwrap_or(0);
            keep.iter().any(|&(l, n)| l == r.label && index < n)
        });
        let split = split_by_patient(&subset, 0.7, seed).map_err(|e| e.to_string())?;
        let train: Vec<&str> = split.records_in(Partition::Train).iter().map(|r| r.patient_id.as_str()).collect();
        let test: Vec<&str> = split.records_in(Partition::Test).iter().map(|r| r.patient_id.as_str()).collect();
        ensure(train.iter().all(|p| !test.contains(p)), || format!("seed {seed}: a patient is in both partitions"))?;
        let counts = split.class_counts(Some(Partition::Train));
        for (label, n) in keep {
            let expected = (0.7 * n as f64).round() as usize;
            let got = counts.get(&label).copied().unwrap_or(0);
            ensure(got == expected, || format!("seed {seed}: {label} has {got} train patients, expected {expected}"))?;
        }
    }
    Ok("100 seeds, no overlap, train counts = round(0.7·P)".into())
}

/// Shared state of the training criteria.
struct Trained {
    _dir: tempfile::TempDir,
    config_path: PathBuf,
    seg_dir: PathBuf,
    roots: Vec<PathBuf>,
    dice: Option<f64>,
    evaluations: Vec<metrics::Evaluation>,
}

fn run_config(seg_dir: Option<&Path>, seed: u64) -> Result<RunConfig, String> {
    let mut config = RunConfig { seed, ..RunConfig::default() };
    config.paths.segmentation = seg_dir.map(Path::to_path_buf);
    config.resolve().map_err(|e| e.to_string())
}

/// Default-config pipeline for each seed. The U-Net is trained once, on the
/// first seed's data, and reused to segment the other seeds' phantoms.
fn train_all() -> Result<Trained, String> {
    let err = |e: Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seg_dir = dir.path().join("seed0").join("seg");
    let mut roots = Vec::new();
    let mut evaluations = Vec::new();
    let mut dice = None;
    for seed in SEEDS {
        let root = dir.path().join(format!("seed{seed}"));
        let config = run_config(Some(&seg_dir), seed)?;
        let ws = Workspace::new(&root, &config);
        pipeline::generate(&config, &ws).map_err(err)?;
        pipeline::split(&config, &ws).map_err(err)?;
        if seed == SEEDS[0] {
            let t = Instant::now();
            let history = pipeline::train_segmentation(&config, &ws).map_err(err)?;
            dice = Some(pipeline::evaluate_segmentation(&ws).map_err(err)?.dice);
            println!("  segmentation: {} epochs in {:.0?}", history.len(), t.elapsed());
        }
        pipeline::make_channels(&ws, AblationMode::Full).map_err(err)?;
        let t = Instant::now();
        let report = pipeline::train(&config, &ws, AblationMode::Full, config.optimizer.epochs, &ws.run_dir(AblationMode::Full))
            .map_err(err)?;
        let eval = pipeline::evaluate(&ws, AblationMode::Full, &ws.run_dir(AblationMode::Full), false).map_err(err)?;
        println!(
            "  seed {seed}: {} epochs on {} slices in {:.0?}; accuracy {}, AUC {}",
            report.history.len(),
            report.train_slices,
            t.elapsed(),
            format_percent(eval.evaluation.slice.accuracy),
            format_percent(eval.evaluation.slice.auc)
        );
        evaluations.push(eval.evaluation);
        roots.push(root);
    }
    let config_path = dir.path().join("config.json");
    Ok(Trained {
        config_path,
        seg_dir,
        roots,
        dice,
        evaluations,
        _dir: dir,
    })
}

fn criterion_7(trained: &Result<Trained, String>) -> Outcome {
    let t = trained.as_ref().map_err(Clone::clone)?;
    let defaults = RunConfig::default();
    ensure(
        defaults.phantom.image_size == 64
            && defaults.ducn.width_factor == 0.25
            && defaults.optimizer.batch_size == 32
            && defaults.optimizer.epochs <= 40,
        || "defaults are not 64×64, width ¼, batch 32, ≤ 40 epochs".into(),
    )?;
    let n = t.evaluations.len() as f64;
    let acc = t.evaluations.iter().map(|e| e.slice.accuracy.unwrap_or(0.0)).sum::<f64>() / n;
    let auc = t.evaluations.iter().map(|e| e.slice.auc.unwrap_or(0.0)).sum::<f64>() / n;
    let detail = format!("mean accuracy {acc:.4}, mean AUC {auc:.4} over {} seeds", t.evaluations.len());
    ensure(acc >= 0.90 && auc >= 0.95, || detail.clone())?;
    Ok(detail)
}

fn criterion_8(trained: &Result<Trained, String>) -> Outcome {
    let t = trained.as_ref().map_err(Clone::clone)?;
    let epochs = RunConfig::default().segmentation.epochs;
    let dice = t.dice.ok_or("no segmentation run")?;
    let detail = format!("test Dice {dice:.4} after {epochs} epochs");
    ensure(epochs <= 30 && dice >= 0.95, || detail.clone())?;
    Ok(detail)
}

fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<IndexEntry> {
    (0..n)
        .map(|i| {
            // Coarse coordinates produce exact distance ties.
            let raw: Vec<f32> = (0..dim).map(|_| rng.random_range(-2..=2) as f32).collect();
            IndexEntry {
                id: CaseId {
                    patient_id: format!("p{:04}", rng.random_range(0..n)),
                    scan_id: "scan0".into(),
                    slice_id: format!("z{i:04}"),
                },
                label: ClassLabel::NCP,
                embedding: raw,
            }
        })
        .collect()
}

fn criterion_9(trained: &Result<Trained, String>) -> Outcome {
    let err = |e: Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in [1usize, 7, 100, 1000] {
        let entries = random_index(&mut rng, n, 4);
        let query: Vec<f32> = (0..4).map(|_| rng.random_range(-2..=2) as f32).collect();
        let mut brute: Vec<(f32, CaseId)> = entries
            .iter()
            .map(|e| (euclidean_distance(&e.embedding, &query).expect("dims"), e.id.clone()))
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let k = n.min(10);
        let got = top_k(&entries, &query, k, None).map_err(err)?;
        let ids: Vec<(f32, CaseId)> = got.recommendations.iter().map(|r| (r.distance, r.entry.id.clone())).collect();
        ensure(ids == brute[..k], || format!("top-{k} of {n} differs from the full sort"))?;
    }

    let t = trained.as_ref().map_err(Clone::clone)?;
    let config = run_config(Some(&t.seg_dir), SEEDS[0])?;
    let ws = Workspace::new(&t.roots[0], &config);
    let config = RunConfig {
        index: ducn_core::pipeline::IndexSettings { scope: IndexScope::All, ..config.index.clone() },
        ..config
    };
    let index = pipeline::build_case_index(&config, &ws, AblationMode::Full, false).map_err(err)?;
    let mut worst_self = 0.0f32;
    let (mut ncp_queries, mut ncp_first) = (0, 0);
    for entry in index.entries() {
        let own = index.query_topk(&entry.embedding, 1, None).map_err(err)?;
        let first = &own.recommendations[0];
        ensure(first.entry.id == entry.id, || format!("{} is not its own rank-1 result", entry.id))?;
        worst_self = worst_self.max(first.distance);
        if entry.label == ClassLabel::NCP {
            let others = index.query_topk(&entry.embedding, 1, Some(&entry.id)).map_err(err)?;
            ncp_queries += 1;
            if others.recommendations[0].entry.label == ClassLabel::NCP {
                ncp_first += 1;
            }
        }
    }
    ensure(worst_self < 1e-5, || format!("self distance {worst_self}"))?;
    let share = ncp_first as f64 / ncp_queries as f64;
    let detail = format!(
        "self at rank 1 for {} entries (max distance {worst_self:.1e}); exclude-self rank 1 is NCP for {ncp_first}/{ncp_queries} NCP queries",
        index.len()
    );
    ensure(share >= 0.95, || detail.clone())?;
    Ok(detail)
}

fn criterion_10() -> Outcome {
    let counts = ConfusionCounts { tp: 3, fp: 1, r#fn: 1, tn: 5 };
    let m = compute_metrics(&counts, &[], &[]).map_err(|e| e.to_string())?;
    let checks = [
        ("sensitivity", m.sensitivity, 0.75),
        ("specificity", m.specificity, 5.0 / 6.0),
        ("precision", m.precision, 0.75),
        ("accuracy", m.accuracy, 0.8),
        ("F1", m.f1, 0.75),
    ];
    for (name, got, want) in checks {
        ensure(got == Some(want), || format!("{name} {got:?}, expected {want}"))?;
    }
    ensure(format_percent(m.specificity) == "83.33", || "specificity does not print as 83.33".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..100 {
        let n = rng.random_range(2..200);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..20u8)) / 20.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let pairwise = auc_pairwise(&scores, &labels).map_err(|e| e.to_string())?.ok_or("no AUC")?;
        let trapezoid = auc_trapezoid(&scores, &labels).map_err(|e| e.to_string())?.ok_or("no AUC")?;
        ensure((pairwise - trapezoid).abs() <= 1e-9, || format!("set {i}: {pairwise} vs {trapezoid}"))?;
    }
    ensure(format_percent(Some(0.9985)) == "99.85", || "0.9985 does not print as 99.85".into())?;
    ensure(format_percent(None) == "N/A", || "absent metric does not print as N/A".into())?;
    Ok("fixture exact, pairwise = trapezoid on 100 sets, 99.85 and N/A".into())
}

fn criterion_11(trained: &Result<Trained, String>) -> Outcome {
    let t = trained.as_ref().map_err(Clone::clone)?;
    let root = &t.roots[0];
    let config = serde_json::json!({
        "seed": SEEDS[0],
        "paths": { "segmentation": t.seg_dir },
    });
    std::fs::write(&t.config_path, config.to_string()).map_err(|e| e.to_string())?;
    let out = Command::new(BIN)
        .arg("--config")
        .arg(&t.config_path)
        .arg("--out")
        .arg(root)
        .args(["--json", "ablate"])
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("ablate failed: {}", String::from_utf8_lossy(&out.stderr)))?;
    let grid: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let rows = grid["rows"].as_array().ok_or("no rows")?;
    let modes: Vec<&str> = rows.iter().filter_map(|r| r["mode"].as_str()).collect();
    ensure(modes == ["full", "LMR", "DMR", "RIR", "UP"], || format!("rows {modes:?}"))?;
    ensure(rows.iter().all(|r| r["epochs"].as_u64().is_some_and(|e| e <= 5)), || "more than 5 epochs".into())?;
    ensure(rows.iter().all(|r| r["slice"]["accuracy"].is_number()), || "a row has no accuracy".into())?;
    let text = std::fs::read_to_string(root.join("ablate/grid.txt")).map_err(|e| e.to_string())?;
    ensure(text.lines().count() == 6, || format!("grid text is not a header and five rows:\n{text}"))?;

    let (full, up) = (&rows[0], &rows[4]);
    ensure(full["data_hash"] == up["data_hash"], || "UP trains on different data".into())?;
    ensure(full["init_param_hash"] != up["init_param_hash"], || "UP has the same initialization".into())?;

    let run_config = run_config(Some(&t.seg_dir), SEEDS[0])?;
    let ws = Workspace::new(root, &run_config);
    let manifest = ws.manifest().map_err(|e| e.to_string())?;
    let records: Vec<_> = manifest.records.iter().collect();
    let load = |mode| pipeline::load_stacks(&ws, &manifest, mode, &records).map_err(|e| e.to_string());
    let full_stacks = load(AblationMode::Full)?;
    let raw: Vec<&[f32]> = full_stacks.iter().map(|s| s.channel(1)).collect();
    let lung: Vec<&[f32]> = full_stacks.iter().map(|s| s.channel(0)).collect();
    let dist: Vec<&[f32]> = full_stacks.iter().map(|s| s.channel(2)).collect();
    let expected: [(AblationMode, [&Vec<&[f32]>; 3]); 4] = [
        (AblationMode::Lmr, [&raw, &raw, &raw]),
        (AblationMode::Dmr, [&lung, &raw, &lung]),
        (AblationMode::Rir, [&lung, &lung, &dist]),
        (AblationMode::Up, [&lung, &raw, &dist]),
    ];
    for (mode, planes) in expected {
        let stacks = load(mode)?;
        for (i, s) in stacks.iter().enumerate() {
            ensure((0..3).all(|c| s.channel(c) == planes[c][i]), || format!("{mode} stack {i} is not bit-exact"))?;
        }
    }
    Ok(format!("5 rows; substitutions bit-exact on {} slices; UP: same data, new init", records.len()))
}

fn file_bytes(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn dir_bytes(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).expect("inside").to_path_buf(), file_bytes(&path)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn criterion_12() -> Outcome {
    let err = |e: Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(12);

    let f32_tensor = NtfTensor {
        shape: vec![3, 5, 7],
        data: NtfData::F32((0..105).map(|_| rng.random_range(-1e3f32..1e3)).collect()),
    };
    let u8_tensor = NtfTensor {
        shape: vec![4, 9],
        data: NtfData::U8((0..36).map(|_| rng.random_range(0..=255)).collect()),
    };
    for (i, t) in [f32_tensor, u8_tensor].iter().enumerate() {
        let path = base.join(format!("t{i}.ntf"));
        ntf::write_tensor(&path, t).map_err(err)?;
        let back = ntf::read_tensor(&path).map_err(err)?;
        ensure(&back == t, || format!("tensor {i} changed"))?;
        ensure(ntf::encode(&back).map_err(err)? == file_bytes(&path)?, || format!("tensor {i} re-encodes differently"))?;
    }

    let config = DuCNConfig {
        width_factor: 0.125,
        embedding_dim: 16,
        image_size: 32,
        in_channels: 3,
    };
    let model = perturbed(&build_ducn(&config, &Init::SeededRandom, 12).map_err(err)?, "", 0.05, 1);
    let adam = Adam::new(&model);
    let meta = ducn_core::ducn::CheckpointMeta {
        model: config.clone(),
        init: Init::SeededRandom,
        seed: 12,
        ablation: AblationMode::Full,
        manifest_hash: "manifest-a".into(),
        init_param_hash: param_hash(&model),
        epochs: 0,
    };
    let (ck1, ck2) = (base.join("ck1"), base.join("ck2"));
    save_checkpoint(&ck1, &model, &adam.state, &meta).map_err(err)?;
    let (loaded, state, loaded_meta) = load_checkpoint(&ck1, Some("manifest-a"), false).map_err(err)?;
    ensure(loaded == model && state == adam.state && loaded_meta == meta, || "checkpoint changed".into())?;
    save_checkpoint(&ck2, &loaded, &state, &loaded_meta).map_err(err)?;
    ensure(dir_bytes(&ck1)? == dir_bytes(&ck2)?, || "checkpoint re-saves differently".into())?;
    let refused = load_checkpoint(&ck1, Some("manifest-b"), false);
    ensure(matches!(refused, Err(Error::Mismatch(_))), || "foreign manifest hash was accepted".into())?;
    load_checkpoint(&ck1, Some("manifest-b"), true).map_err(err)?;

    let data = base.join("data");
    let manifest = split_by_patient(&small_dataset(&data, 3, 2, 32)?, 0.7, 1).map_err(err)?;
    manifest.save().map_err(err)?;
    let before = dir_bytes(&data)?;
    let reloaded = DatasetManifest::load(&data).map_err(err)?;
    ensure(reloaded == manifest, || "manifest changed".into())?;
    reloaded.save().map_err(err)?;
    ensure(dir_bytes(&data)? == before, || "manifest re-saves differently".into())?;

    let entries: Vec<IndexEntry> = manifest
        .records
        .iter()
        .map(|r| {
            let (e, _) = l2_normalize(&(0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>());
            IndexEntry { id: CaseId::of(r), label: r.label, embedding: e }
        })
        .collect();
    let index = EmbeddingIndex::new(entries, IndexScope::All, manifest.content_hash().map_err(err)?).map_err(err)?;
    let (ix1, ix2) = (base.join("ix1"), base.join("ix2"));
    index.save(&ix1).map_err(err)?;
    let back = EmbeddingIndex::load(&ix1).map_err(err)?;
    ensure(back == index, || "index changed".into())?;
    back.save(&ix2).map_err(err)?;
    ensure(dir_bytes(&ix1)? == dir_bytes(&ix2)?, || "index re-saves differently".into())?;

    let cli = |args: &[&str]| {
        Command::new(BIN)
            .arg("--config")
            .arg(base.join("cli.json"))
            .arg("--out")
            .arg(base.join("work"))
            .args(args)
            .env("RUST_LOG", "error")
            .output()
            .map_err(|e| e.to_string())
    };
    let small = serde_json::json!({
        "phantom": { "num_patients_per_class": 3, "slices_per_patient": 2, "image_size": 32 },
        "ducn": { "image_size": 32 },
        "segmentation": { "epochs": 1, "batch_size": 8, "lr": 1e-3, "halve_every": 20 },
        "optimizer": { "epochs": 1, "batch_size": 8, "lr": 1e-3, "halve_every": 20 }
    });
    std::fs::write(base.join("cli.json"), small.to_string()).map_err(|e| e.to_string())?;
    for step in [&["gen"][..], &["split"], &["train-seg"], &["make-channels"], &["train"], &["index"]] {
        let out = cli(step)?;
        ensure(out.status.success(), || format!("{step:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
    }
    for step in [&["--seed", "3", "gen"][..], &["--seed", "3", "split"], &["--seed", "3", "make-channels"]] {
        let out = cli(step)?;
        ensure(out.status.success(), || format!("{step:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
    }
    let key = "ncp-000/scan0/z00";
    for command in [&["--seed", "3", "eval"][..], &["--seed", "3", "recommend", "--slice", key]] {
        let out = cli(command)?;
        let stderr = String::from_utf8_lossy(&out.stderr);
        ensure(!out.status.success() && stderr.contains("\"mismatch\""), || format!("{command:?} was not refused: {stderr}"))?;
    }
    let out = cli(&["--seed", "3", "--allow-manifest-mismatch", "eval"])?;
    ensure(out.status.success(), || "the override flag did not allow evaluation".into())?;

    Ok("ntf, checkpoint, manifest and index round-trip bit-exactly; mismatches refused".into())
}

fn run(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    (outcome, start.elapsed())
}

fn main() {
    let mut results = vec![
        (1, run(criterion_1)),
        (2, run(criterion_2)),
        (3, run(criterion_3)),
        (4, run(criterion_4)),
        (5, run(criterion_5)),
        (6, run(criterion_6)),
        (10, run(criterion_10)),
        (12, run(criterion_12)),
    ];
    println!("training the default pipeline on {} seeds", SEEDS.len());
    let trained = catch_unwind(train_all).unwrap_or_else(|_| Err("training panicked".into()));
    results.push((7, run(|| criterion_7(&trained))));
    results.push((8, run(|| criterion_8(&trained))));
    results.push((9, run(|| criterion_9(&trained))));
    results.push((11, run(|| criterion_11(&trained))));
    results.sort_by_key(|r| r.0);

    for (number, (outcome, took)) in &results {
        match outcome {
            Ok(detail) => println!("criterion {number:>2}: PASS ({took:.1?}) {detail}"),
            Err(detail) => println!("criterion {number:>2}: FAIL ({took:.1?}) {detail}"),
        }
    }
    let failed = results.iter().filter(|r| r.1 .0.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

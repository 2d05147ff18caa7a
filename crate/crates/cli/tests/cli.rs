use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ducn");

/// A small, fast configuration: 32×32 phantoms, four patients per class.
fn write_config(dir: &Path) -> PathBuf {
    let config = serde_json::json!({
        "phantom": { "num_patients_per_class": 4, "slices_per_patient": 2, "image_size": 32 },
        "ducn": { "image_size": 32 },
        "segmentation": { "epochs": 2, "batch_size": 8, "lr": 1e-3, "halve_every": 20 },
        "optimizer": { "epochs": 1, "batch_size": 8, "lr": 1e-3, "halve_every": 20 },
        "ablate_epochs": 1
    });
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_string()).unwrap();
    path
}

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let root = dir.path().join("work");
        Self { _dir: dir, config, root }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.root)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "ducn {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn json(&self, args: &[&str]) -> Value {
        let mut all = vec!["--json"];
        all.extend_from_slice(args);
        serde_json::from_str(&self.ok(&all)).unwrap()
    }

    fn error(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(!out.status.success(), "ducn {args:?} should fail");
        let stderr = String::from_utf8(out.stderr).unwrap();
        let last = stderr.lines().last().expect("an error line");
        serde_json::from_str(last).unwrap()
    }

    fn prepared(self) -> Self {
        self.ok(&["gen"]);
        self.ok(&["split"]);
        self.ok(&["train-seg"]);
        self.ok(&["make-channels"]);
        self
    }
}

#[test]
fn pipeline_runs_end_to_end() {
    let ws = Workspace::new();
    let gen = ws.json(&["gen"]);
    assert_eq!(gen["slices"], 24);
    let split = ws.json(&["split"]);
    assert_eq!(split["train_patients"].as_u64().unwrap() + split["test_patients"].as_u64().unwrap(), 12);

    ws.ok(&["train-seg"]);
    let seg = ws.json(&["eval-seg"]);
    assert!((0.0..=1.0).contains(&seg["dice"].as_f64().unwrap()));
    ws.ok(&["make-channels"]);
    let train = ws.json(&["train"]);
    assert_eq!(train["history"].as_array().unwrap().len(), 1);

    let eval = ws.ok(&["eval"]);
    assert!(eval.contains("Sensitivity"), "{eval}");
    assert!(ws.root.join("runs/full/eval.json").exists());

    let index = ws.json(&["index", "--scope", "all"]);
    assert_eq!(index["entries"], 24);
    let rec = ws.json(&["recommend", "--slice", "ncp-000/scan0/z00", "--topk", "3"]);
    assert!(rec["prediction"]["p_ncp"].is_number());
    if rec["prediction"]["positive"] == true {
        let first = &rec["result"]["recommendations"][0];
        assert_eq!(first["rank"], 1);
        assert_eq!(first["entry"]["patient_id"], "ncp-000");
        assert!(first["distance"].as_f64().unwrap() < 1e-5);
    }

    let image = ws.root.join("data/images/ncp-000_scan0_z00.ntf");
    let by_image = ws.json(&["infer", "--image", image.to_str().unwrap()]);
    let by_key = ws.json(&["infer", "--slice", "ncp-000/scan0/z00"]);
    assert_eq!(by_image, by_key);

    let snapshot: Value =
        serde_json::from_str(&std::fs::read_to_string(ws.root.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(snapshot["index"]["topk"], 5);
}

#[test]
fn failures_print_one_json_error_line() {
    let ws = Workspace::new();
    let err = ws.error(&["eval"]);
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("manifest"));

    ws.ok(&["gen"]);
    let err = ws.error(&["train-seg"]);
    assert_eq!(err["error"], "data");

    let out = Command::new(BIN).args(["recommend"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn foreign_checkpoints_are_refused_without_override() {
    let ws = Workspace::new().prepared();
    ws.ok(&["train"]);
    ws.ok(&["eval"]);

    ws.ok(&["--seed", "7", "gen"]);
    ws.ok(&["--seed", "7", "split"]);
    ws.ok(&["--seed", "7", "make-channels"]);
    let err = ws.error(&["--seed", "7", "eval"]);
    assert_eq!(err["error"], "mismatch");
    ws.ok(&["--seed", "7", "--allow-manifest-mismatch", "eval"]);
}

#[test]
fn ablate_writes_a_five_row_grid() {
    let ws = Workspace::new().prepared();
    let grid = ws.json(&["ablate"]);
    let rows = grid["rows"].as_array().unwrap();
    let modes: Vec<&str> = rows.iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["full", "LMR", "DMR", "RIR", "UP"]);
    assert!(rows.iter().all(|r| r["epochs"] == 1));

    let (full, up) = (&rows[0], &rows[4]);
    assert_eq!(full["data_hash"], up["data_hash"]);
    assert_ne!(full["init_param_hash"], up["init_param_hash"]);
    assert_ne!(full["data_hash"], rows[1]["data_hash"]);

    let text = std::fs::read_to_string(ws.root.join("ablate/grid.txt")).unwrap();
    for name in ["DuCN ", "DuCN-LMR", "DuCN-DMR", "DuCN-RIR", "DuCN-UP"] {
        assert!(text.contains(name), "{text}");
    }
}

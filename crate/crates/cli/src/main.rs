//! `ducn`: runs the segmentation → distance map → dual-head network pipeline
//! stage by stage over a workspace directory.
//!
//! ```text
//! ducn --out work gen
//! ducn --out work split
//! ducn --out work train-seg
//! ducn --out work make-channels
//! ducn --out work train
//! ducn --out work eval
//! ```

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ducn_core::caseindex::IndexScope;
use ducn_core::pipeline::{self, RunConfig, SliceInput, Workspace};
use ducn_core::{AblationMode, Error, Result};

const DEFAULT_ROOT: &str = "ducn-data";

#[derive(Debug, Parser)]
#[command(name = "ducn", version, about = "Lung CT detection and similar-case retrieval on phantom data")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed for data generation, splitting, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Workspace directory.
    #[arg(long, global = true, value_name = "DIR", env = "DUCN_DATA_DIR")]
    out: Option<PathBuf>,

    /// Input ablation: full, LMR, DMR, RIR or UP.
    #[arg(long, global = true, value_name = "MODE")]
    ablation: Option<AblationMode>,

    /// Number of similar cases to return.
    #[arg(long, global = true, value_name = "K")]
    topk: Option<usize>,

    /// Leave the query slice itself out of its recommendations.
    #[arg(long, global = true)]
    exclude_self: bool,

    /// Run every gradient computation on one thread.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Index scope: ncp_only or all.
    #[arg(long, global = true, value_name = "SCOPE")]
    scope: Option<IndexScope>,

    /// Override the epoch count of the training command being run.
    #[arg(long, global = true, value_name = "N")]
    epochs: Option<usize>,

    /// Use a checkpoint or index built from a different manifest.
    #[arg(long, global = true)]
    allow_manifest_mismatch: bool,

    /// Print the JSON report instead of the text one.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the phantom dataset.
    Gen,
    /// Patient-level train/test split and NCP balancing of the train split.
    Split,
    /// Train the U-Net lung segmenter.
    TrainSeg,
    /// Dice of the U-Net on the test split.
    EvalSeg,
    /// Segment every slice and write the network input stacks.
    MakeChannels,
    /// Train the dual-head network.
    Train,
    /// Detection metrics on the test split.
    Eval,
    /// Build the similar-case index.
    Index,
    /// Similar confirmed cases for one slice.
    Recommend(SliceArgs),
    /// NCP probability of one slice.
    Infer(SliceArgs),
    /// Train and evaluate all five ablation modes.
    Ablate,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct SliceArgs {
    /// Manifest slice as patient/scan/slice.
    #[arg(long)]
    slice: Option<String>,
    /// Raw image tensor (.ntf) to segment and classify.
    #[arg(long, value_name = "PATH")]
    image: Option<PathBuf>,
}

impl SliceArgs {
    fn input(&self) -> SliceInput {
        match (&self.slice, &self.image) {
            (Some(key), _) => SliceInput::Key(key.clone()),
            (None, Some(path)) => SliceInput::Image(path.clone()),
            (None, None) => unreachable!("clap requires one of --slice and --image"),
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<(RunConfig, Workspace)> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(mode) = cli.ablation {
        config.ablation = mode;
    }
    if let Some(k) = cli.topk {
        config.index.topk = k;
    }
    if let Some(scope) = cli.scope {
        config.index.scope = scope;
    }
    config.index.exclude_self |= cli.exclude_self;
    config.deterministic |= cli.deterministic;
    if let Some(epochs) = cli.epochs {
        match cli.command {
            Command::TrainSeg => config.segmentation.epochs = epochs,
            Command::Ablate => config.ablate_epochs = epochs,
            _ => config.optimizer.epochs = epochs,
        }
    }
    let root = cli
        .out
        .clone()
        .or_else(|| config.paths.root.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
    config.paths.root = Some(root.clone());
    let config = config.resolve()?;
    let ws = Workspace::new(root, &config);
    Ok((config, ws))
}

/// A report printed as text, or as JSON with `--json`.
struct Report {
    text: String,
    json: serde_json::Value,
}

impl Report {
    fn new<T: Serialize>(text: String, value: &T) -> Result<Self> {
        Ok(Self {
            text,
            json: serde_json::to_value(value)?,
        })
    }
}

fn run(cli: &Cli) -> Result<Report> {
    let (config, ws) = resolve_config(cli)?;
    pipeline::write_snapshot(&config, &ws)?;
    let mode = config.ablation;
    let allow = cli.allow_manifest_mismatch;
    match &cli.command {
        Command::Gen => {
            let manifest = pipeline::generate(&config, &ws)?;
            let counts = manifest.class_counts(None);
            let text = format!("generated {} slices in {}\n", manifest.records.len(), ws.data_dir().display());
            Report::new(text, &serde_json::json!({ "slices": manifest.records.len(), "classes": counts }))
        }
        Command::Split => {
            let s = pipeline::split(&config, &ws)?;
            let text = format!(
                "{} train / {} test patients; train slices {:?}; test slices {:?}; {} augmented copies\n",
                s.train_patients, s.test_patients, s.train_slices, s.test_slices, s.augmented
            );
            Report::new(text, &s)
        }
        Command::TrainSeg => {
            let history = pipeline::train_segmentation(&config, &ws)?;
            let last = history.last().map_or(f64::NAN, |h| h.mean_loss);
            let text = format!("trained U-Net for {} epochs, final Dice loss {last:.4}\n", history.len());
            Report::new(text, &history)
        }
        Command::EvalSeg => {
            let r = pipeline::evaluate_segmentation(&ws)?;
            Report::new(format!("test Dice {:.4} over {} slices\n", r.dice, r.slices), &r)
        }
        Command::MakeChannels => {
            let meta = pipeline::make_channels(&ws, mode)?;
            let text = format!(
                "wrote {} {mode} input stacks to {}\n",
                meta.slices,
                ws.channels_dir(mode).display()
            );
            Report::new(text, &meta)
        }
        Command::Train => {
            let r = pipeline::train(&config, &ws, mode, config.optimizer.epochs, &ws.run_dir(mode))?;
            let text = match r.history.last() {
                Some(last) => format!(
                    "trained {mode} for {} epochs on {} slices, final loss {:.4}\n",
                    r.history.len(),
                    r.train_slices,
                    last.loss.l_total
                ),
                None => "no epochs run\n".to_string(),
            };
            Report::new(text, &r)
        }
        Command::Eval => {
            let r = pipeline::evaluate(&ws, mode, &ws.run_dir(mode), allow)?;
            Report::new(r.render(), &r)
        }
        Command::Index => {
            let index = pipeline::build_case_index(&config, &ws, mode, allow)?;
            let text = format!(
                "indexed {} slices ({:?}) in {}\n",
                index.len(),
                index.scope(),
                ws.index_dir(mode).display()
            );
            Report::new(text, &serde_json::json!({ "entries": index.len(), "scope": index.scope() }))
        }
        Command::Recommend(args) => {
            let outcome = pipeline::recommend(&config, &ws, mode, &args.input(), allow)?;
            Report::new(outcome.render(), &outcome)
        }
        Command::Infer(args) => {
            let p = pipeline::infer(&ws, mode, &args.input(), allow)?;
            let decision = if p.positive { "positive" } else { "negative" };
            Report::new(format!("p_ncp {:.4} ({decision})\n", p.p_ncp), &p)
        }
        Command::Ablate => {
            let grid = pipeline::ablate(&config, &ws)?;
            Report::new(grid.render(), &grid)
        }
    }
}

fn error_record(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            if cli.json {
                println!("{}", report.json);
            } else {
                print!("{}", report.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}

//! Command-line laboratory: dataset generation, pretraining, adaptation
//! runs, and report aggregation. Every experiment is reproducible from a
//! pinned seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use freda_core::checkpoint::Checkpoint;
use freda_core::config::{Method, RunConfig, Scenario};
use freda_core::error::{Error, Result};
use freda_core::harness::{run, summarize, write_report, RunReport};
use freda_core::model::{pretrain, PretrainConfig, SmallCnn};
use freda_core::rng::SeededRng;
use freda_core::stream::{make_shapes_dataset, LabeledDataset};

#[derive(Parser)]
#[command(
    name = "freda",
    version,
    about = "Desk-scale test-time adaptation on heterogeneous corruption streams"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate clean train/test glyph datasets in container format.
    GenData(GenDataArgs),
    /// Train the compact CNN on a clean dataset and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Drive one adaptation method over a corrupted stream.
    Run(Box<RunArgs>),
    /// Aggregate run reports into a method x corruption CSV matrix.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for train.frda and test.frda.
    #[arg(long)]
    out: PathBuf,
    /// Number of glyph classes (2..=16).
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Training exemplars per class.
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    /// Test exemplars per class.
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    /// Square image side (16 or 32).
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    /// Clean training dataset (container format).
    #[arg(long)]
    data: PathBuf,
    /// Dataset for the reported accuracy (defaults to --data).
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clean exemplar dataset; the stream corrupts it on the fly.
    #[arg(long)]
    data: PathBuf,
    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file. Precedence: defaults < file < flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// source | tbn | tbn-dec | tent | freda.
    #[arg(long)]
    method: Option<String>,
    /// mixed | continual.
    #[arg(long)]
    scenario: Option<String>,
    /// Comma-separated corruption names.
    #[arg(long)]
    corruptions: Option<String>,
    /// Corruption severity 1..=5.
    #[arg(long)]
    severity: Option<u8>,
    /// Total stream length.
    #[arg(long)]
    length: Option<usize>,
    /// Stream/adaptation seed (env FREDA_SEED overrides).
    #[arg(long)]
    seed: Option<u64>,
    /// Cluster / branch count K.
    #[arg(long)]
    clusters: Option<usize>,
    /// Feature repository capacity N.
    #[arg(long)]
    kmeans_size: Option<usize>,
    /// Aggregation interval f.
    #[arg(long)]
    comm_interval: Option<usize>,
    /// Amplitude perturbation strength.
    #[arg(long)]
    alpha: Option<f64>,
    /// Perturbation noise scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Consistency loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Entropy gate in nats (default 0.4·ln C).
    #[arg(long)]
    h0: Option<f64>,
    /// Novelty gate on |cos(y, ybar)|.
    #[arg(long)]
    eps: Option<f64>,
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Stream batch size (also the per-branch pool capacity).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Ablations: no-fd | no-fa | no-select (repeatable).
    #[arg(long, value_name = "ABLATION")]
    ablate: Vec<String>,
    /// Use the mean-centered novelty cosine.
    #[arg(long)]
    cosine_centered: bool,
    /// Emit pre-update predictions for the entropy baseline.
    #[arg(long)]
    predict_before_update: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run report JSON files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Summary CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Run(a) => cmd_run(*a),
        Cmd::Report(a) => cmd_report(a),
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let root = SeededRng::from_seed(a.seed);
    let mut train_rng = root.substream("train");
    let train = make_shapes_dataset(a.per_class, a.classes, a.size, a.size, &mut train_rng)?;
    let train_path = a.out.join("train.frda");
    train.save(&train_path)?;
    let mut test_rng = root.substream("test");
    let test = make_shapes_dataset(a.test_per_class, a.classes, a.size, a.size, &mut test_rng)?;
    let test_path = a.out.join("test.frda");
    test.save(&test_path)?;
    println!(
        "{}",
        serde_json::json!({
            "train": train_path,
            "train_samples": train.len(),
            "test": test_path,
            "test_samples": test.len(),
            "classes": a.classes,
            "size": a.size,
            "seed": a.seed,
        })
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let ds = LabeledDataset::load(&a.data)?;
    let model = SmallCnn::for_dataset(&ds)?;
    let cfg = PretrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        momentum: a.momentum,
    };
    let ck = pretrain(&model, &ds, &cfg, &SeededRng::from_seed(a.seed))?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    ck.save(&a.out)?;
    let eval_ds = match &a.eval {
        Some(p) => LabeledDataset::load(p)?,
        None => ds,
    };
    let acc = model.evaluate(ck.params(), &eval_ds, a.batch_size)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": a.out,
            "epochs": a.epochs,
            "final_accuracy": acc,
            "eval_samples": eval_ds.len(),
            "seed": a.seed,
        })
    );
    Ok(())
}

/// Layers flags over the config file over the defaults.
fn resolve_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &a.method {
        cfg.method = Method::parse(m)?;
    }
    if let Some(s) = &a.scenario {
        cfg.scenario = Scenario::parse(s)?;
    }
    if let Some(list) = &a.corruptions {
        cfg.corruptions = list
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }
    if let Some(v) = a.severity {
        cfg.severity = v;
    }
    if let Some(v) = a.length {
        cfg.length = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Ok(s) = std::env::var("FREDA_SEED") {
        cfg.seed = s.trim().parse().map_err(|_| {
            Error::config("seed", format!("FREDA_SEED must be an unsigned integer, got {s:?}"))
        })?;
    }
    if let Some(v) = a.clusters {
        cfg.freda.clusters = v;
    }
    if let Some(v) = a.kmeans_size {
        cfg.freda.kmeans_size = v;
    }
    if let Some(v) = a.comm_interval {
        cfg.freda.comm_interval = v;
    }
    if let Some(v) = a.alpha {
        cfg.freda.alpha = v;
    }
    if let Some(v) = a.sigma {
        cfg.freda.sigma = v;
    }
    if let Some(v) = a.lambda {
        cfg.freda.lambda = v;
    }
    if let Some(v) = a.h0 {
        cfg.freda.h0 = Some(v);
    }
    if let Some(v) = a.eps {
        cfg.freda.eps = v;
    }
    if let Some(v) = a.lr {
        cfg.freda.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.freda.batch_size = v;
    }
    for ablation in &a.ablate {
        match ablation.as_str() {
            "no-fd" => cfg.freda.disable_fd = true,
            "no-fa" => cfg.freda.disable_fa = true,
            "no-select" => cfg.freda.disable_selection = true,
            other => {
                return Err(Error::config(
                    "ablate",
                    format!("unknown ablation {other:?}; use no-fd|no-fa|no-select"),
                ))
            }
        }
    }
    if a.cosine_centered {
        cfg.freda.cosine_centered = true;
    }
    if a.predict_before_update {
        cfg.predict_before_update = true;
    }
    Ok(cfg)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = LabeledDataset::load(&a.data)?;
    let report = run(&ck, &ds, &cfg)?;
    let (json_path, csv_path) = write_report(&report, &a.out)?;
    println!(
        "{}",
        serde_json::json!({
            "run_id": report.run_id,
            "method": report.method,
            "stream_length": report.stream_length,
            "overall_error": report.overall_error,
            "report": json_path,
            "samples": csv_path,
        })
    );
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(a.inputs.len());
    for path in &a.inputs {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        reports.push(
            RunReport::from_json(&text)
                .map_err(|e| Error::format(format!("{}: {e}", path.display())))?,
        );
    }
    let table = summarize(&reports);
    match &a.out {
        Some(path) => std::fs::write(path, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

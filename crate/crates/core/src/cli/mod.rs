//! The `mgml` command line: data generation, both training stages,
//! evaluation, gradient checking and ablations. Every command writes a
//! `manifest.json` next to its outputs.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

use crate::data::io::{load_dataset, read_detections, write_annotations, write_detections, write_patches};
use crate::data::{builtin_split, ClassSplit, DataError, Dataset};
use crate::eval::{confusion_csv, detect, evaluate, pr_points_csv, EvalOptions, InferOptions, Interp};
use crate::gradcheck::{corrupted_suite, run_suites, standard_suites};
use crate::synth::{build_world, generate_dataset, SynthError, WorldSpec};
use crate::training::{
    adapt_few_shot, alpha_grid, component_grid, lambda_grid, loss_csv, run_ablation, train_base, AblationSpec,
    Checkpoint, TrainConfig, TrainError,
};

pub use manifest::{hash_inputs, RunManifest};

/// Exit code for bad flags, configs or inputs.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::Train(TrainError::Config { .. } | TrainError::SplitMismatch { .. })
            | CliError::Data(DataError::Parse { .. } | DataError::Validation { .. } | DataError::InvalidConfig(_))
            | CliError::Synth(SynthError::InvalidSpec(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mgml", version, about = "Few-shot detection head training and evaluation on synthetic or ingested regions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and its train/val data.
    Synth(SynthArgs),
    /// Train on base classes.
    BaseTrain(TrainArgs),
    /// Fine-tune a base checkpoint on K shots of every class.
    Adapt(AdaptArgs),
    /// Detect on a dataset and score the detections.
    Eval(EvalArgs),
    /// Finite-difference checks of every loss.
    Gradcheck(GradcheckArgs),
    /// Component ablation or a λ₀/α sweep over several seeds.
    Ablate(AblateArgs),
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1)"))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub num_base: usize,
    #[arg(long, default_value_t = 3)]
    pub num_novel: usize,
    #[arg(long, default_value_t = 0.7, value_parser = unit_interval)]
    pub confusability: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 6)]
    pub patch_dim: usize,
    /// Minimum train scenes per base class.
    #[arg(long, default_value_t = 40)]
    pub scenes_per_class: usize,
    /// Train instances per novel class.
    #[arg(long, default_value_t = 10)]
    pub shots: usize,
}

/// Flags shared by both training stages. Flags override the config file,
/// which overrides the stage defaults.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Annotation JSON-lines; patches are read from the `.patches` sidecar when present.
    #[arg(long)]
    pub train: PathBuf,
    /// Builtin split name or a split JSON file.
    #[arg(long)]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub enable_se: Option<bool>,
    #[arg(long)]
    pub enable_oc: Option<bool>,
    #[arg(long)]
    pub enable_metric: Option<bool>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub base_ckpt: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "allpoint")]
    pub interp: Interp,
    /// Score existing detections (JSON-lines) instead of running the checkpoint.
    #[arg(long)]
    pub detections: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Adds a suite with a deliberately wrong backward rule.
    #[arg(long, hide = true)]
    pub with_corrupted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Grid {
    Components,
    Lambda,
    Alpha,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_value = "components")]
    pub grid: Grid,
    #[arg(long)]
    pub out: PathBuf,
    /// First seed; seeds are consecutive.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Sweep values for the lambda and alpha grids.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    pub lambda0: f64,
    #[arg(long, default_value_t = 0.7, value_parser = unit_interval)]
    pub confusability: f64,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Epochs of both stages.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adaptation-stage config file; base-stage keys come from the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// A builtin split name, or a JSON file holding a split.
pub fn resolve_split(s: &str) -> Result<ClassSplit> {
    if let Some(split) = builtin_split(s) {
        return Ok(split);
    }
    let path = Path::new(s);
    if !path.exists() {
        return Err(CliError::Usage(format!("{s:?} is neither a builtin split nor a split file")));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let split: ClassSplit =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    split.validate().map_err(CliError::Usage)?;
    Ok(split)
}

/// `train.jsonl` pairs with `train.patches` when that file exists.
pub fn patches_path(annotations: &Path) -> PathBuf {
    annotations.with_extension("patches")
}

pub fn load_data(annotations: &Path, split: &ClassSplit) -> Result<Dataset> {
    let patches = patches_path(annotations);
    let ds = if patches.exists() {
        load_dataset(annotations, &patches, split)?
    } else {
        crate::data::io::load_annotations(annotations, split)?
    };
    Ok(ds)
}

fn train_config(args: &TrainArgs, stage_default: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => stage_default.clone(),
    };
    if cfg.stage != stage_default.stage {
        return Err(CliError::Usage(format!(
            "config stage is {} but this command runs {}",
            cfg.stage.as_str(),
            stage_default.stage.as_str()
        )));
    }
    if let Some(v) = args.seed {
        cfg.rng_seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.shots {
        cfg.k_shot = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.lambda0 {
        cfg.lambda0 = v;
    }
    if let Some(v) = args.enable_se {
        cfg.enable_se = v;
    }
    if let Some(v) = args.enable_oc {
        cfg.enable_oc = v;
    }
    if let Some(v) = args.enable_metric {
        cfg.enable_metric = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn existing(paths: &[&Path]) -> Vec<PathBuf> {
    paths.iter().filter(|p| p.exists()).map(|p| p.to_path_buf()).collect()
}

fn cmd_synth(a: &SynthArgs) -> Result<RunManifest> {
    let spec = WorldSpec {
        num_base: a.num_base,
        num_novel: a.num_novel,
        patch_dim: a.patch_dim,
        confusability: a.confusability,
        noise_sigma: a.noise,
        rng_seed: a.seed,
        ..WorldSpec::default()
    };
    let world = build_world(&spec)?;
    let data = generate_dataset(&world, a.scenes_per_class, a.shots, a.seed)?;
    create_dir(&a.out)?;
    let mut artifacts = Vec::new();
    for (name, ds) in [("train", &data.train), ("val", &data.val)] {
        let ann = a.out.join(format!("{name}.jsonl"));
        let patches = patches_path(&ann);
        write_annotations(&ann, ds, &world.split)?;
        write_patches(&patches, ds)?;
        artifacts.push(ann);
        artifacts.push(patches);
    }
    let split_path = a.out.join("split.json");
    write(&split_path, serde_json::to_string_pretty(&world.split).expect("split serializes"))?;
    artifacts.push(split_path);
    info!("{} train and {} val scenes", data.train.len(), data.val.len());
    Ok(RunManifest::new(
        "synth",
        serde_json::json!({
            "num_base": a.num_base,
            "num_novel": a.num_novel,
            "patch_dim": a.patch_dim,
            "confusability": a.confusability,
            "noise_sigma": a.noise,
            "scenes_per_class": a.scenes_per_class,
            "shots": a.shots,
        }),
        a.seed,
        artifacts,
        hash_inputs(&[], &format!("{a:?}"))?,
    ))
}

fn write_training(out: &Path, name: &str, outcome: &crate::training::TrainOutcome) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let ckpt = out.join(format!("{name}.mgck"));
    outcome.checkpoint.save(&ckpt)?;
    let losses = out.join(format!("{name}_losses.csv"));
    write(&losses, loss_csv(&outcome.epochs))?;
    let cfg = out.join(format!("{name}.cfg"));
    write(&cfg, outcome.checkpoint.config.to_kv())?;
    Ok(vec![ckpt, losses, cfg])
}

fn config_json(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn cmd_base_train(a: &TrainArgs) -> Result<RunManifest> {
    let cfg = train_config(a, TrainConfig::base())?;
    let split = resolve_split(&a.split)?;
    let data = load_data(&a.train, &split)?;
    let outcome = train_base(&data, &split, &cfg)?;
    let artifacts = write_training(&a.out, "base", &outcome)?;
    let mut inputs = existing(&[&a.train, &patches_path(&a.train)]);
    inputs.extend(a.config.clone());
    Ok(RunManifest::new(
        "base-train",
        config_json(&cfg),
        cfg.rng_seed,
        artifacts,
        hash_inputs(&inputs, &cfg.to_kv())?,
    ))
}

fn cmd_adapt(a: &AdaptArgs) -> Result<RunManifest> {
    let cfg = train_config(&a.train, TrainConfig::adaptation())?;
    let split = resolve_split(&a.train.split)?;
    let data = load_data(&a.train.train, &split)?;
    let base = Checkpoint::load(&a.base_ckpt)?;
    let outcome = adapt_few_shot(&base, &data, &split, &cfg)?;
    let artifacts = write_training(&a.train.out, "adapted", &outcome)?;
    let mut inputs = existing(&[&a.train.train, &patches_path(&a.train.train), &a.base_ckpt]);
    inputs.extend(a.train.config.clone());
    Ok(RunManifest::new(
        "adapt",
        config_json(&cfg),
        cfg.rng_seed,
        artifacts,
        hash_inputs(&inputs, &cfg.to_kv())?,
    ))
}

fn cmd_eval(a: &EvalArgs) -> Result<RunManifest> {
    let split = resolve_split(&a.split)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    if ckpt.split != split {
        return Err(TrainError::SplitMismatch {
            checkpoint: ckpt.split.name.clone(),
            data: split.name.clone(),
        }
        .into());
    }
    let data = load_data(&a.val, &split)?;
    create_dir(&a.out)?;
    let infer = InferOptions {
        seed: a.seed,
        jitter_per_object: ckpt.config.jitter_per_object,
        ..InferOptions::default()
    };
    let dets = match &a.detections {
        Some(p) => read_detections(p, &split)?,
        None => detect(&ckpt, &data, &infer)?,
    };
    let opts = EvalOptions {
        interp: a.interp,
        ..EvalOptions::default()
    };
    let report = evaluate(&dets, &data, &split, &opts);

    let det_path = a.out.join("detections.jsonl");
    write_detections(&det_path, &dets, &split)?;
    let files = [
        ("report.json", report.to_json()),
        ("confusion.csv", confusion_csv(&report.labels, &report.confusion)),
        ("confusion_by_matched.csv", confusion_csv(&report.labels, &report.confusion_by_matched)),
        ("confusion_by_gt.csv", confusion_csv(&report.labels, &report.confusion_by_gt)),
        ("pr_points.csv", pr_points_csv(&report)),
    ];
    let mut artifacts = vec![det_path];
    for (name, text) in files {
        let p = a.out.join(name);
        write(&p, text)?;
        artifacts.push(p);
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "mAP_base {}  mAP_novel {}  mean_confusion {}",
        fmt(report.map_base),
        fmt(report.map_novel),
        fmt(report.mean_confusion)
    );
    let mut inputs = existing(&[&a.ckpt, &a.val, &patches_path(&a.val)]);
    inputs.extend(a.detections.clone());
    Ok(RunManifest::new(
        "eval",
        serde_json::json!({ "interp": a.interp, "split": split.name }),
        a.seed,
        artifacts,
        hash_inputs(&inputs, &format!("{:?}{:?}", a.interp, a.seed))?,
    ))
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<RunManifest> {
    let mut suites = standard_suites();
    if a.with_corrupted {
        suites.push(corrupted_suite());
    }
    let report = run_suites(&suites, a.seeds).map_err(|e| CliError::Failed(e.to_string()))?;
    print!("{}", report.table());
    if !report.all_passed() {
        return Err(CliError::Failed("gradient check failed".into()));
    }
    Ok(RunManifest::new(
        "gradcheck",
        serde_json::json!({ "seeds": a.seeds }),
        0,
        Vec::new(),
        hash_inputs(&[], &a.seeds.to_string())?,
    ))
}

fn cmd_ablate(a: &AblateArgs) -> Result<RunManifest> {
    let values = |default: &[f64]| if a.values.is_empty() { default.to_vec() } else { a.values.clone() };
    let cells = match a.grid {
        Grid::Components => component_grid(a.alpha, a.lambda0),
        Grid::Lambda => lambda_grid(&values(&[1.0, 1.5, 2.0, 2.5])),
        Grid::Alpha => alpha_grid(&values(&[0.05, 0.1, 0.5, 1.0, 2.0]), a.lambda0),
    };
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut spec = AblationSpec::new(cells, (a.seed..a.seed + a.seeds).collect());
    spec.world.confusability = a.confusability;
    if let Some(p) = &a.config {
        spec.adapt = TrainConfig::load(p)?;
    }
    if let Some(k) = a.shots {
        spec.adapt.k_shot = k;
    }
    if let Some(e) = a.epochs {
        spec.base.epochs = e;
        spec.adapt.epochs = e;
    }
    spec.base.validate()?;
    spec.adapt.validate()?;
    let table = run_ablation(&spec)?;
    create_dir(&a.out)?;
    let csv = a.out.join("ablation.csv");
    write(&csv, table.to_csv())?;
    for r in &table.summary {
        println!(
            "{:<20} mAP_base {:.4}  mAP_novel {:.4}  mean_confusion {:.2}",
            r.cell.name, r.map_base, r.map_novel, r.mean_confusion
        );
    }
    let mut inputs = Vec::new();
    inputs.extend(a.config.clone());
    Ok(RunManifest::new(
        "ablate",
        serde_json::json!({
            "grid": format!("{:?}", a.grid),
            "cells": spec.cells,
            "confusability": a.confusability,
            "base": config_json(&spec.base),
            "adapt": config_json(&spec.adapt),
        }),
        a.seed,
        vec![csv],
        hash_inputs(&inputs, &format!("{a:?}"))?,
    ))
}

fn out_dir(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Synth(a) => Some(&a.out),
        Command::BaseTrain(a) => Some(&a.out),
        Command::Adapt(a) => Some(&a.train.out),
        Command::Eval(a) => Some(&a.out),
        Command::Gradcheck(_) => None,
        Command::Ablate(a) => Some(&a.out),
    }
}

/// Runs one parsed command and writes its manifest.
pub fn execute(cli: &Cli) -> Result<RunManifest> {
    let start = Instant::now();
    let mut manifest = match &cli.command {
        Command::Synth(a) => cmd_synth(a)?,
        Command::BaseTrain(a) => cmd_base_train(a)?,
        Command::Adapt(a) => cmd_adapt(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Gradcheck(a) => cmd_gradcheck(a)?,
        Command::Ablate(a) => cmd_ablate(a)?,
    };
    manifest.duration_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir(&cli.command) {
        let p = dir.join("manifest.json");
        write(&p, manifest.to_json())?;
    }
    Ok(manifest)
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

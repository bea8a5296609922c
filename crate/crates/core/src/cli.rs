//! Subcommands of the `dnc` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{DncError, Result};
use crate::geosim::{simulate, simulate_stationary_features, Design, SimParams, SplitSizes};
use crate::io::{self, Checkpoint, SimManifest, MANIFEST_FILE};
use crate::model::{DesignLayout, DncModel};
use crate::posterior::predict;
use crate::train::{fit, TrainReport};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "DNC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dnc", version, about = "Deep neural coregionalization for multivariate spatial data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset and write train/val/test CSVs, a truth sidecar and a manifest.
    Simulate(SimulateArgs),
    /// Fit a model and write a checkpoint plus a training report.
    Fit(FitArgs),
    /// Monte Carlo dropout predictions at new locations.
    Predict(PredictArgs),
    /// Score a prediction file against observed outcomes.
    Evaluate(EvaluateArgs),
    /// Long-format CSV of predictions and true correlations for plotting.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub design: Design,
    #[arg(long, default_value_t = 2500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw the stationary design from this many random Fourier features
    /// instead of exact Gaussian-process samples; for large `n`.
    #[arg(long)]
    pub features: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the training preset of this simulation design.
    #[arg(long)]
    pub design: Option<Design>,
    /// How covariate columns map to the per-outcome design rows.
    #[arg(long)]
    pub layout: Option<DesignLayout>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Keep probability for both network families.
    #[arg(long)]
    pub keep_prob: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint path; the report goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Locations CSV (`s1,s2,x1..xp`, outcome columns optional).
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, short = 'M')]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the checkpoint's keep probabilities.
    #[arg(long)]
    pub keep_prob: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Dataset CSV with the observed outcomes, rows in prediction order.
    #[arg(long)]
    pub test: PathBuf,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Observed outcomes, rows in prediction order.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Truth sidecar written by `simulate`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Sizes the global thread pool from `DNC_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| DncError::Config(format!("{THREADS_ENV} must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| DncError::Config(format!("cannot start {n} threads: {e}")))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Export(a) => cmd_export(&a),
    }
}

fn required(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| DncError::Config(format!("missing --{name}")))
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut params = SimParams::for_design(a.design, a.n, a.seed);
    params.split = SplitSizes::proportional(a.n);
    let sim = match (a.features, a.design) {
        (None, _) => simulate(&params)?,
        (Some(d), Design::Stationary) => simulate_stationary_features(&params, d)?,
        (Some(_), Design::Deepgp) => {
            return Err(DncError::Config(
                "--features is only available for the stationary design".into(),
            ))
        }
    };
    io::save_simulation(&a.out, &sim)?;
    info!(
        "wrote {} train, {} val and {} test rows to {}",
        sim.train.n(),
        sim.val.n(),
        sim.test.n(),
        a.out.display()
    );
    Ok(())
}

/// Layout recorded by `simulate` next to the training file, if any.
fn manifest_layout(train: &Path) -> Result<Option<DesignLayout>> {
    let path = train.with_file_name(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let manifest: SimManifest = io::load_json(&path)?;
    Ok(Some(manifest.params.design_layout))
}

/// `model.json` -> `model.report.json`.
pub fn report_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("report.json")
}

/// Loads both datasets and fits a freshly initialised model. The layout is
/// taken from the config, else from a simulation manifest beside `train_path`,
/// else shared.
pub fn fit_files(
    cfg: &RunConfig,
    train_path: &Path,
    val_path: &Path,
) -> Result<(DncModel, TrainReport, DesignLayout)> {
    cfg.validate()?;
    let layout = match cfg.design_layout {
        Some(l) => l,
        None => manifest_layout(train_path)?.unwrap_or(DesignLayout::Shared),
    };
    let train = io::load_dataset(train_path, layout)?;
    let val = io::read_dataset_table(val_path)?.into_dataset(layout, Some(train.n_outcomes()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let model = DncModel::new(
        train.n_outcomes(),
        train.n_covariates(),
        &cfg.architecture,
        cfg.train.regularization(),
        &mut rng,
    )?;
    let (model, report) = fit(model, &train, &val, &cfg.train)?;
    Ok((model, report, layout))
}

pub fn cmd_fit(a: &FitArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(a.config.as_deref(), a.design)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(k) = a.keep_prob {
        cfg.train.keep_prob_h = k;
        cfg.train.keep_prob_psi = k;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if a.layout.is_some() {
        cfg.design_layout = a.layout;
    }
    cfg.validate()?;
    let train_path = required(a.train.clone(), &cfg.train_path, "train")?;
    let val_path = required(a.val.clone(), &cfg.val_path, "val")?;
    let out = required(a.out.clone(), &cfg.out, "out")?;

    let (model, report, layout) = fit_files(&cfg, &train_path, &val_path)?;
    info!(
        "fit {} epochs in {:.1} s; best epoch {}, validation RMSPE {:.4}",
        report.epochs_run,
        report.wall_clock_seconds,
        report.best_epoch,
        report.val_rmspe[report.best_epoch - 1]
    );
    io::save_checkpoint(&out, &Checkpoint::from_model(&model, layout, cfg.seed))?;
    io::save_json(&report_path(&out), &report)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let cfg = RunConfig::resolve(a.config.as_deref(), None)?;
    let samples = a.samples.unwrap_or(cfg.samples);
    let seed = a.seed.unwrap_or(cfg.seed);
    let model_path = required(a.model.clone(), &cfg.model_path, "model")?;
    let test_path = required(a.test.clone(), &cfg.test_path, "test")?;
    let out = required(a.out.clone(), &cfg.out, "out")?;
    if samples < 2 {
        return Err(DncError::Config(format!("--samples must be at least 2, got {samples}")));
    }

    let checkpoint = io::load_checkpoint(&model_path)?;
    let mut model = checkpoint.to_model()?;
    if let Some(k) = a.keep_prob {
        let mut reg = model.regularization();
        reg.keep_prob_h = k;
        reg.keep_prob_psi = k;
        model
            .set_regularization(reg)
            .map_err(|e| DncError::Config(format!("--keep-prob: {e}")))?;
    }
    let table = io::read_dataset_table(&test_path)?;
    if table.covariates.ncols() != checkpoint.n_covariates {
        return Err(DncError::Schema(format!(
            "{} has {} covariate columns; the model expects {}",
            test_path.display(),
            table.covariates.ncols(),
            checkpoint.n_covariates
        )));
    }
    let designs = checkpoint
        .design_layout
        .build(table.covariates.view(), model.n_outcomes())?;
    let predictions = predict(&model, table.locations.view(), &designs, samples, seed)?;
    io::save_predictions(&out, table.locations.view(), &predictions)?;
    info!("wrote {} predictions to {}", predictions.n(), out.display());
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let (locations, table) = io::load_predictions(&a.predictions)?;
    let truth = io::read_dataset_table(&a.test)?;
    let report = io::evaluate_predictions(locations.view(), &table, &truth)?;
    match &a.out {
        Some(out) => io::save_metrics(out, &report),
        None => {
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| DncError::Schema(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_export(a: &ExportArgs) -> Result<()> {
    let (locations, table) = io::load_predictions(&a.predictions)?;
    let observed = a.test.as_deref().map(io::read_dataset_table).transpose()?;
    let truth = a.truth.as_deref().map(io::load_truth).transpose()?;
    io::tidy_export(&a.out, locations.view(), &table, observed.as_ref(), truth.as_ref())
}

use std::fs;
use std::path::{Path, PathBuf};

use flnn::baseline::train_baseline;
use flnn::bcd::{train_batched, train_full, TrainOptions, TrainReport};
use flnn::data::{load_idx, subset, Dataset, Normalization, Split};
use flnn::network::{accuracy, feed_forward, loss_value};
use flnn::verify::{self, CheckOutcome};
use flnn::{checkpoint, NetworkSpec, Weights};

use crate::config::{Mode, RunConfig};
use crate::error::{CliError, Result};
use crate::metrics::{self, MergedRow, MetricsRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.flnn";
pub const CONFIG_FILE: &str = "config.txt";

fn idx_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let dotted = stem.replacen("-idx", ".idx", 1);
    for name in [stem.to_string(), format!("{stem}.gz"), dotted.clone(), format!("{dotted}.gz")] {
        let path = dir.join(name);
        if path.is_file() {
            return Ok(path);
        }
    }
    Err(CliError::MissingPath(dir.join(stem)))
}

fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = idx_file(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = idx_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    Ok(load_idx(&images, &labels, split)?)
}

/// Loads the train and test sets named by `cfg`, applying subsets and
/// normalisation. Statistics come from the (subset) training set.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    if !cfg.data_dir.is_dir() {
        return Err(CliError::MissingPath(cfg.data_dir.clone()));
    }
    let mut train = load_split(&cfg.data_dir, Split::Train)?;
    let mut test = load_split(&cfg.data_dir, Split::Test)?;
    if let Some(k) = cfg.train_subset {
        train = subset(&train, k, cfg.seed)?;
    }
    if let Some(k) = cfg.test_subset {
        test = subset(&test, k, 0)?;
    }
    if cfg.normalize != Normalization::None {
        let reference = train.clone();
        train.normalize_with(&reference, cfg.normalize);
        test.normalize_with(&reference, cfg.normalize);
    }
    Ok((train, test))
}

pub struct TrainOutcome {
    pub spec: NetworkSpec,
    pub weights: Weights,
    pub report: TrainReport,
    pub rows: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.report.final_test_acc()
    }
}

/// Trains on already loaded data without touching the filesystem.
pub fn run(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let opts = TrainOptions { eval_every: cfg.eval_every, ..TrainOptions::with_test(test) };
    let (weights, report) = match cfg.mode {
        Mode::LiftedFull => train_full(&spec, train, &cfg.hyperparams(&spec)?, &opts)?,
        Mode::LiftedBatched => train_batched(&spec, train, &cfg.hyperparams(&spec)?, &opts)?,
        Mode::Baseline => train_baseline(&spec, train, &cfg.sgd(&spec)?, &opts)?,
    };
    let rows = metrics::rows_from_report(&cfg.method_label(), &report, cfg.wall_clock);
    Ok(TrainOutcome { spec, weights, report, rows })
}

/// Writes the config, metrics and checkpoint of a finished run to `cfg.out_dir`.
pub fn save_run(cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_string())?;
    metrics::write_metrics(&cfg.out_dir.join(METRICS_FILE), &outcome.rows)?;
    checkpoint::save(&cfg.out_dir.join(CHECKPOINT_FILE), &outcome.spec, &outcome.weights)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let outcome = run(cfg, &train, &test)?;
    save_run(cfg, &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub samples: usize,
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, Weights)> {
    if !path.is_file() {
        return Err(CliError::MissingPath(path.to_path_buf()));
    }
    checkpoint::load(path).map_err(|e| CliError::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn evaluate(spec: &NetworkSpec, w: &Weights, test: &Dataset) -> Result<EvalOutcome> {
    let fwd = feed_forward(spec, w, test.inputs.view())?;
    let loss = loss_value(spec.loss(), fwd.prediction.view(), test.labels.view())?;
    Ok(EvalOutcome {
        accuracy: accuracy(spec, w, test.inputs.view(), &test.classes)?,
        mean_loss: loss / test.len().max(1) as f64,
        samples: test.len(),
    })
}

/// Evaluates a checkpoint on the test set described by `cfg`.
pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig) -> Result<EvalOutcome> {
    let (spec, w) = load_checkpoint(checkpoint)?;
    let (_, test) = load_data(cfg)?;
    evaluate(&spec, &w, &test)
}

pub struct CompareOutcome {
    pub runs: Vec<(RunConfig, TrainOutcome)>,
    pub merged: Vec<MergedRow>,
}

/// Checks that every config trains the same network on the same data.
pub fn check_comparable(configs: &[RunConfig]) -> Result<()> {
    if configs.len() < 2 {
        return Err(CliError::Mismatch(format!("need at least two configs, got {}", configs.len())));
    }
    let first = &configs[0];
    let spec = first.spec()?;
    for (i, cfg) in configs.iter().enumerate().skip(1) {
        if cfg.spec()? != spec {
            return Err(CliError::Mismatch(format!(
                "config {} trains {} but config 1 trains {}",
                i + 1,
                describe(&cfg.spec()?),
                describe(&spec)
            )));
        }
        if !first.same_data(cfg) {
            return Err(CliError::Mismatch(format!("config {} uses different data than config 1", i + 1)));
        }
    }
    Ok(())
}

fn describe(spec: &NetworkSpec) -> String {
    let acts: Vec<_> = spec.activations().iter().map(|a| a.name()).collect();
    format!("{} [{}] with {} loss", spec.arch_string(), acts.join(","), spec.loss())
}

/// Runs every config on shared data and writes a merged CSV to `out`.
pub fn cmd_compare(configs: &[RunConfig], out: &Path) -> Result<CompareOutcome> {
    check_comparable(configs)?;
    for cfg in configs {
        cfg.validate()?;
    }
    let (train, test) = load_data(&configs[0])?;
    let mut runs = Vec::with_capacity(configs.len());
    let mut merged = Vec::new();
    for cfg in configs {
        let outcome = run(cfg, &train, &test)?;
        save_run(cfg, &outcome)?;
        merged.extend(outcome.rows.iter().map(|r| MergedRow {
            method: r.method.clone(),
            epoch_fraction: r.epoch_fraction,
            test_acc: r.test_acc,
        }));
        runs.push((cfg.clone(), outcome));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    metrics::write_merged(out, configs[0].loss, &merged)?;
    Ok(CompareOutcome { runs, merged })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flips the sign of `∂B/∂u` for ReLU.
    ReluGradSign,
}

impl std::str::FromStr for Fault {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu-grad-sign" => Ok(Fault::ReluGradSign),
            other => Err(CliError::Config(format!("unknown fault '{other}' (expected relu-grad-sign)"))),
        }
    }
}

pub fn cmd_verify(fault: Option<Fault>) -> Vec<CheckOutcome> {
    match fault {
        None => verify::run_all(),
        Some(Fault::ReluGradSign) => verify::run_all_with(verify::flipped_relu_gradient),
    }
}

pub fn format_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:<6}  {:>8}  detail\n", "check", "result", "seconds");
    for o in outcomes {
        let result = if o.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{:<width$}  {:<6}  {:>8.2}  {}\n", o.name, result, o.seconds, o.detail));
    }
    s
}

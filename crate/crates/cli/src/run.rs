//! Shared plumbing: effective configuration, run directories and the
//! files a training run leaves behind.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trits_core::config::Config;
use trits_core::dataio::{load_csv, Dataset, SplitSpec};
use trits_core::trainer::Splits;

use crate::RunArgs;

pub const CHECKPOINT: &str = "checkpoint.trts";
pub const CONFIG: &str = "config.txt";
pub const METRICS: &str = "metrics.csv";
pub const GATES: &str = "gate_report.csv";
pub const PREDICTIONS: &str = "predictions.csv";
pub const SUMMARY: &str = "run.csv";

/// One-row description of a finished training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub channels: usize,
    pub rows: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub period: usize,
    pub best_epoch: usize,
    pub epochs: usize,
    pub parameters: usize,
}

/// Defaults, then the config file, then overrides in order, then `--seed`.
pub fn effective_config(args: &RunArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => Config::default(),
    };
    apply_overrides(&mut cfg, args)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_overrides(cfg: &mut Config, args: &RunArgs) -> Result<()> {
    for pair in &args.overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(())
}

pub fn out_dir(args: &RunArgs) -> PathBuf {
    args.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

/// `(config, directory)` per requested horizon: `<out>/h<T>` for each entry
/// of `--horizons`, or `<out>` itself with the configured horizon.
pub fn horizon_runs(cfg: &Config, args: &RunArgs) -> Vec<(Config, PathBuf)> {
    let out = out_dir(args);
    if args.horizons.is_empty() {
        return vec![(cfg.clone(), out)];
    }
    args.horizons
        .iter()
        .map(|&t| {
            let mut c = cfg.clone();
            c.horizon = t;
            (c, out.join(format!("h{t}")))
        })
        .collect()
}

pub fn single_data(args: &RunArgs) -> Result<&Path> {
    match args.data.as_slice() {
        [one] => Ok(one),
        [] => bail!("--data is required"),
        _ => bail!("this command takes exactly one --data file"),
    }
}

pub fn load_dataset(path: &Path, cfg: &Config) -> Result<Dataset> {
    load_csv(path, &cfg.date_column).with_context(|| format!("loading {}", path.display()))
}

pub fn prepare_splits(ds: &Dataset, cfg: &Config) -> Result<Splits> {
    let spec = SplitSpec::benchmark(&ds.name, ds.rows());
    Ok(Splits::prepare(ds, spec, cfg.lookback)?)
}

/// Configuration saved next to a checkpoint, with overrides applied.
pub fn run_config(dir: &Path, args: &RunArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => {
            let path = dir.join(CONFIG);
            if !path.exists() {
                bail!("no run configuration at {}", path.display());
            }
            Config::load(&path)?
        }
    };
    apply_overrides(&mut cfg, args)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn checkpoint_path(dir: &Path) -> Result<PathBuf> {
    let path = dir.join(CHECKPOINT);
    if !path.is_file() {
        bail!("checkpoint {} not found", path.display());
    }
    Ok(path)
}

/// Worker threads allowed by `TRITS_THREADS`, default 1.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("TRITS_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("TRITS_THREADS must be a positive integer, got `{v}`"),
        },
        Err(_) => Ok(1),
    }
}

//! `trits`: train, evaluate, forecast, ablate, describe datasets and emit
//! plot data.

mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use trits_core::dataio::dataset_stats;
use trits_core::model::TriTs;
use trits_core::report::{gate_rows, metric_rows, write_csv, PredictionRecord};
use trits_core::tensor::{save_checkpoint, Tensor};
use trits_core::trainer::{ablate, evaluate, train, Evaluation, Variant};

use run::{RunSummary, CHECKPOINT, CONFIG, GATES, METRICS, PREDICTIONS, SUMMARY};

#[derive(Parser)]
#[command(name = "trits", version, about = "Tri-modal long-horizon time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoint, metrics, gate report and predictions.
    Train(RunArgs),
    /// Evaluate trained runs, one row per dataset and horizon.
    Eval(RunArgs),
    /// Forecast the horizon that follows the end of the data file.
    Predict(RunArgs),
    /// Train the full model and its four ablations with one seed.
    Ablate(RunArgs),
    /// Width, split sizes and season/trend covariance ratio per dataset.
    Stats(RunArgs),
    /// Plot-ready CSVs for gate weights, forecasts and runtime scaling.
    Plot(RunArgs),
}

#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV; repeatable for `stats`.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Output directory (train, ablate) or run directory (eval, predict, plot).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `KEY=VALUE` configuration override; repeatable, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated horizons, one run per horizon under `<out>/h<T>`.
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<usize>,
    /// Same as `--override trainer.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Split scored by `eval`.
    #[arg(long, default_value = "test")]
    split: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Plot(a) => plot::cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration problems, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<trits_core::Error>() {
        Some(trits_core::Error::Config(_) | trits_core::Error::UnknownKey { .. }) => 2,
        _ => 1,
    }
}

/// Evaluations of every split that holds at least one window.
fn evaluate_splits(model: &TriTs, splits: &trits_core::trainer::Splits) -> Result<Vec<Evaluation>> {
    let need = model.config.lookback + model.config.horizon;
    let mut out = Vec::new();
    for name in ["train", "val", "test"] {
        let ds = splits.get(name).expect("known split");
        if ds.rows() < need {
            warn!("split `{name}` has {} rows, fewer than {need}; skipped", ds.rows());
            continue;
        }
        out.push(evaluate(model, ds, name, name != "train")?);
    }
    Ok(out)
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let base = run::effective_config(args)?;
    let path = run::single_data(args)?;
    let ds = run::load_dataset(path, &base)?;
    for (cfg, dir) in run::horizon_runs(&base, args) {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let splits = run::prepare_splits(&ds, &cfg)?;
        info!("training on {} (T={}) into {}", ds.name, cfg.horizon, dir.display());
        let outcome = match train(&cfg, &splits) {
            Ok(o) => o,
            Err(trits_core::Error::Diverged { epoch, batch, loss, last_good }) => {
                let keep = dir.join("last_good.trts");
                save_checkpoint(&last_good, &keep)?;
                bail!(
                    "training diverged at epoch {epoch}, batch {batch} (loss {loss}); last good parameters in {}",
                    keep.display()
                );
            }
            Err(e) => return Err(e.into()),
        };
        let model = &outcome.model;
        model.save(dir.join(CHECKPOINT))?;
        model.config.save(dir.join(CONFIG))?;

        let evals = evaluate_splits(model, &splits)?;
        let reports: Vec<_> = evals.iter().map(|e| e.report.clone()).collect();
        write_csv(dir.join(METRICS), &metric_rows(&outcome.history, outcome.best_epoch, &reports))?;
        let gates: Vec<_> = evals
            .iter()
            .flat_map(|e| gate_rows(&e.report.split, &e.gates))
            .collect();
        write_csv(dir.join(GATES), &gates)?;
        let held_out = evals.iter().rev().find(|e| !e.predictions.is_empty());
        let preds: Vec<PredictionRecord> = held_out
            .map(|e| e.predictions.iter().map(PredictionRecord::from).collect())
            .unwrap_or_default();
        write_csv(dir.join(PREDICTIONS), &preds)?;
        let summary = RunSummary {
            dataset: ds.name.clone(),
            channels: ds.channels(),
            rows: ds.rows(),
            lookback: cfg.lookback,
            horizon: cfg.horizon,
            period: model.period.unwrap_or(0),
            best_epoch: outcome.best_epoch,
            epochs: outcome.history.len(),
            parameters: model.num_parameters(),
        };
        write_csv(dir.join(SUMMARY), &[summary])?;

        println!(
            "{} T={}: best epoch {} of {} ({:.1}s, {} parameters)",
            ds.name,
            cfg.horizon,
            outcome.best_epoch,
            outcome.history.len(),
            outcome.seconds,
            model.num_parameters()
        );
        for r in &reports {
            println!("  {:<5} mse {:.6} mae {:.6}", r.split, r.mse, r.mae);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    dataset: String,
    horizon: usize,
    split: String,
    mse: f64,
    mae: f64,
}

fn cmd_eval(args: &RunArgs) -> Result<()> {
    let path = run::single_data(args)?;
    let mut rows = Vec::new();
    let dirs = run::horizon_runs(&Default::default(), args);
    for (_, dir) in dirs {
        let ckpt = run::checkpoint_path(&dir)?;
        let cfg = run::run_config(&dir, args)?;
        let ds = run::load_dataset(path, &cfg)?;
        let splits = run::prepare_splits(&ds, &cfg)?;
        let model = TriTs::load(&cfg, ds.channels(), &ckpt)
            .with_context(|| format!("loading {}", ckpt.display()))?;
        let Some(split) = splits.get(&args.split) else {
            bail!("unknown split `{}` (expected train, val or test)", args.split);
        };
        let e = evaluate(&model, split, &args.split, false)?;
        rows.push(EvalRow {
            dataset: ds.name.clone(),
            horizon: cfg.horizon,
            split: args.split.clone(),
            mse: e.report.mse,
            mae: e.report.mae,
        });
    }
    println!("{:<14} {:>7} {:>10} {:>10}", "dataset", "horizon", "MSE", "MAE");
    for r in &rows {
        println!("{:<14} {:>7} {:>10.6} {:>10.6}", r.dataset, r.horizon, r.mse, r.mae);
    }
    let out = run::out_dir(args);
    write_csv(out.join("eval.csv"), &rows)?;
    Ok(())
}

#[derive(Serialize)]
struct ForecastRow {
    step: usize,
    channel: String,
    value: f64,
}

fn cmd_predict(args: &RunArgs) -> Result<()> {
    let path = run::single_data(args)?;
    for (_, dir) in run::horizon_runs(&Default::default(), args) {
        let ckpt = run::checkpoint_path(&dir)?;
        let cfg = run::run_config(&dir, args)?;
        let ds = run::load_dataset(path, &cfg)?;
        if ds.rows() < cfg.lookback {
            bail!("{} has {} rows, fewer than the lookback {}", ds.name, ds.rows(), cfg.lookback);
        }
        let splits = run::prepare_splits(&ds, &cfg)?;
        let model = TriTs::load(&cfg, ds.channels(), &ckpt)?;
        let recent = splits.scaler.transform(&ds.segment(ds.rows() - cfg.lookback, cfg.lookback)?);
        let x = Tensor::new([1, cfg.lookback, ds.channels()], recent.values().to_vec())?;
        let y = model.predict(&x)?.output;
        let c = ds.channels();
        let rows: Vec<ForecastRow> = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| ForecastRow {
                step: i / c + 1,
                channel: ds.channel_names[i % c].clone(),
                value: splits.scaler.inverse(i % c, v),
            })
            .collect();
        let file = dir.join("forecast.csv");
        write_csv(&file, &rows)?;
        println!("{} steps x {} channels written to {}", cfg.horizon, c, file.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationCsvRow {
    variant: String,
    best_epoch: usize,
    split: String,
    mse: f64,
    mae: f64,
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let base = run::effective_config(args)?;
    let path = run::single_data(args)?;
    let ds = run::load_dataset(path, &base)?;
    let threads = run::thread_cap()?;
    for (cfg, dir) in run::horizon_runs(&base, args) {
        std::fs::create_dir_all(&dir)?;
        let splits = run::prepare_splits(&ds, &cfg)?;
        let rows = ablate(&cfg, &splits, &Variant::STANDARD, threads)?;
        println!("{} T={}", ds.name, cfg.horizon);
        println!("  {:<20} {:>10} {:>10}", "variant", "MSE", "MAE");
        for r in &rows {
            println!("  {:<20} {:>10.6} {:>10.6}", r.variant.label(), r.report.mse, r.report.mae);
        }
        let csv_rows: Vec<AblationCsvRow> = rows
            .iter()
            .map(|r| AblationCsvRow {
                variant: r.variant.label(),
                best_epoch: r.best_epoch,
                split: r.report.split.clone(),
                mse: r.report.mse,
                mae: r.report.mae,
            })
            .collect();
        write_csv(dir.join("ablation.csv"), &csv_rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StatsRow {
    dataset: String,
    dim: usize,
    rows: usize,
    train: usize,
    val: usize,
    test: usize,
    cov_ratio: f64,
}

fn cmd_stats(args: &RunArgs) -> Result<()> {
    let cfg = run::effective_config(args)?;
    if args.data.is_empty() {
        bail!("--data is required");
    }
    let mut rows = Vec::new();
    println!(
        "{:<14} {:>5} {:>8} {:>24} {:>12}",
        "dataset", "dim", "rows", "size (train, val, test)", "cov ratio"
    );
    for path in &args.data {
        let ds = run::load_dataset(path, &cfg)?;
        let s = dataset_stats(&ds, cfg.lookback, cfg.sma_window)?;
        let size = format!("({}, {}, {})", s.samples.0, s.samples.1, s.samples.2);
        println!("{:<14} {:>5} {:>8} {:>24} {:>12.6}", s.name, s.dim, s.rows, size, s.cov_ratio);
        rows.push(StatsRow {
            dataset: s.name,
            dim: s.dim,
            rows: s.rows,
            train: s.samples.0,
            val: s.samples.1,
            test: s.samples.2,
            cov_ratio: s.cov_ratio,
        });
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        write_csv(out.join("stats.csv"), &rows)?;
    }
    Ok(())
}

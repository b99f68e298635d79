//! Plot-ready `x,y,series` files. Rendering is left to external tools.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trits_core::config::Config;
use trits_core::nn::ParamBuilder;
use trits_core::report::{read_csv, write_csv, GateRow, PlotPoint, PredictionRecord};
use trits_core::tensor::{Graph, ParamStore, Tensor};
use trits_core::vision::VisionBranch;

use crate::run::{self, RunSummary, GATES, PREDICTIONS, SUMMARY};
use crate::RunArgs;

/// Windows drawn in the forecast overlay.
const OVERLAY_WINDOWS: usize = 4;

/// Lookbacks and batch size of the vision timing sweep.
const SWEEP: [usize; 5] = [96, 192, 384, 768, 1536];
const SWEEP_BATCH: usize = 16;

/// The run directory itself, or its immediate subdirectories that hold a
/// gate report (the layout `train --horizons` produces).
fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(GATES).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GATES).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no {GATES} under {}", root.display());
    }
    Ok(dirs)
}

fn label(summary: &RunSummary, many: bool) -> String {
    if many {
        format!("{}/h{}", summary.dataset, summary.horizon)
    } else {
        summary.dataset.clone()
    }
}

/// Mean gate weight per modality, one point per modality and run, taken
/// from the test split (or the last split present).
fn gate_points(gates: &[GateRow], x: &str) -> Vec<PlotPoint> {
    let split = ["test", "val", "train"]
        .into_iter()
        .find(|s| gates.iter().any(|g| g.split == *s))
        .unwrap_or("test");
    gates
        .iter()
        .filter(|g| g.split == split)
        .map(|g| PlotPoint {
            x: x.to_string(),
            y: g.mean_weight,
            series: g.modality.clone(),
        })
        .collect()
}

/// Truth and forecast for a few evenly spaced windows of the last channel.
fn overlay_points(preds: &[PredictionRecord], channels: usize) -> Vec<PlotPoint> {
    let Some(last) = preds.iter().map(|p| p.window_id).max() else {
        return Vec::new();
    };
    let count = OVERLAY_WINDOWS.min(last + 1);
    let step = if count > 1 { last / (count - 1) } else { 1 };
    let chosen: Vec<usize> = (0..count).map(|i| i * step).collect();
    let channel = channels.saturating_sub(1);
    let mut points = Vec::new();
    for &w in &chosen {
        let rows: Vec<&PredictionRecord> = preds
            .iter()
            .filter(|p| p.window_id == w && p.channel == channel)
            .collect();
        for (kind, pick) in [("truth", true), ("forecast", false)] {
            points.extend(rows.iter().map(|p| PlotPoint {
                x: p.step.to_string(),
                y: if pick { p.y_true } else { p.y_pred },
                series: format!("window{w}_{kind}"),
            }));
        }
    }
    points
}

/// Median vision-branch forward time over `runs` passes at each lookback.
pub fn vision_timing(cfg: &Config, channels: usize, lookbacks: &[usize], runs: usize) -> Result<Vec<PlotPoint>> {
    let period = cfg.vision_period.max(2);
    let mut points = Vec::new();
    for &l in lookbacks {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let branch = VisionBranch::new(&mut pb, channels, l, cfg.horizon, period.min(l), cfg.vision())?;
        let x = Tensor::from_fn([SWEEP_BATCH, l, channels], |i| (i as f64 * 0.05).sin());
        let mut times = Vec::with_capacity(runs);
        for i in 0..=runs {
            let t0 = Instant::now();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            branch.forward(&mut g, &store, xv)?;
            // the first pass warms caches and is not timed
            if i > 0 {
                times.push(t0.elapsed().as_secs_f64());
            }
        }
        times.sort_by(f64::total_cmp);
        points.push(PlotPoint {
            x: l.to_string(),
            y: times[times.len() / 2],
            series: "vision_forward".into(),
        });
    }
    Ok(points)
}

pub fn cmd_plot(args: &RunArgs) -> Result<()> {
    let Some(root) = &args.out else {
        bail!("--out must name a training run directory");
    };
    let dirs = run_dirs(root)?;
    let many = dirs.len() > 1;
    let mut gates = Vec::new();
    let mut overlay = Vec::new();
    let mut first: Option<(Config, usize)> = None;
    for dir in &dirs {
        let summary: RunSummary = read_csv(dir.join(SUMMARY))?
            .into_iter()
            .next()
            .with_context(|| format!("{} is empty", dir.join(SUMMARY).display()))?;
        let rows: Vec<GateRow> = read_csv(dir.join(GATES))?;
        let x = label(&summary, many);
        gates.extend(gate_points(&rows, &x));
        let preds: Vec<PredictionRecord> = read_csv(dir.join(PREDICTIONS))?;
        overlay.extend(overlay_points(&preds, summary.channels).into_iter().map(|mut p| {
            if many {
                p.series = format!("{x}:{}", p.series);
            }
            p
        }));
        if first.is_none() {
            first = Some((run::run_config(dir, args)?, summary.channels));
        }
    }
    let plots = root.join("plots");
    std::fs::create_dir_all(&plots)?;
    write_csv(plots.join("gates.csv"), &gates)?;
    write_csv(plots.join("forecast.csv"), &overlay)?;
    let (cfg, channels) = first.expect("at least one run");
    if cfg.vision_enabled {
        write_csv(plots.join("scaling.csv"), &vision_timing(&cfg, channels, &SWEEP, 5)?)?;
    }
    println!("plot data written to {}", plots.display());
    Ok(())
}

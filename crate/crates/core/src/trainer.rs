//! Training loop, evaluation, the repeat-last-value baseline and the
//! branch-ablation harness.

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::dataio::{split, Dataset, SplitSpec, Standardizer, Windows};
use crate::error::{Error, Result};
use crate::fusion::{GateReport, Modality};
use crate::model::TriTs;
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};
use crate::vision::detect_period;

/// Z-scored train / validation / test segments.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub scaler: Standardizer,
}

impl Splits {
    /// Splits `ds` chronologically and standardizes every segment with
    /// statistics of the training segment only.
    pub fn prepare(ds: &Dataset, spec: SplitSpec, lookback: usize) -> Result<Self> {
        let (train, val, test) = split(ds, spec, lookback)?;
        let scaler = Standardizer::fit(&train);
        Ok(Self {
            train: scaler.transform(&train),
            val: scaler.transform(&val),
            test: scaler.transform(&test),
            scaler,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Dataset> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// One training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub train_mse: f64,
    pub train_mae: f64,
    pub val_mse: Option<f64>,
    pub val_mae: Option<f64>,
    pub seconds: f64,
}

/// Error metrics over every window, horizon step and channel of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub split: String,
    pub mse: f64,
    pub mae: f64,
    /// MSE per horizon step.
    pub step_mse: Vec<f64>,
    pub windows: usize,
    pub seconds: f64,
    pub parameters: usize,
}

/// One line of a predictions file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRow {
    pub window: usize,
    pub step: usize,
    pub channel: usize,
    pub y_true: f64,
    pub y_pred: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub gates: Vec<(Modality, f64)>,
    pub predictions: Vec<PredictionRow>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model holding the best parameters seen.
    pub model: TriTs,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
    pub seconds: f64,
}

/// Streaming accumulator for squared and absolute error.
#[derive(Clone, Debug)]
struct ErrorSums {
    sq: f64,
    abs: f64,
    count: usize,
    step_sq: Vec<f64>,
    step_count: Vec<usize>,
}

impl ErrorSums {
    fn new(horizon: usize) -> Self {
        Self {
            sq: 0.0,
            abs: 0.0,
            count: 0,
            step_sq: vec![0.0; horizon],
            step_count: vec![0; horizon],
        }
    }

    fn add(&mut self, step: usize, y_true: f64, y_pred: f64) {
        let e = y_pred - y_true;
        self.sq += e * e;
        self.abs += e.abs();
        self.count += 1;
        self.step_sq[step] += e * e;
        self.step_count[step] += 1;
    }

    fn report(&self, split: &str, windows: usize, seconds: f64, parameters: usize) -> MetricReport {
        let n = self.count.max(1) as f64;
        MetricReport {
            split: split.to_string(),
            mse: self.sq / n,
            mae: self.abs / n,
            step_mse: self
                .step_sq
                .iter()
                .zip(&self.step_count)
                .map(|(s, &c)| s / c.max(1) as f64)
                .collect(),
            windows,
            seconds,
            parameters,
        }
    }
}

/// Period for the vision branch: the configured value, or the one detected
/// on the training segment when the configuration leaves it at 0.
pub fn resolve_period(cfg: &Config, train: &Dataset) -> Result<Option<usize>> {
    if !cfg.vision_enabled {
        return Ok(None);
    }
    if cfg.vision_period > 0 {
        return Ok(Some(cfg.vision_period));
    }
    let x = Tensor::new([1, train.rows(), train.channels()], train.values().to_vec())?;
    let p = detect_period(&x)?;
    // the image needs at least one full row inside the lookback
    let p = if p > cfg.lookback { cfg.lookback } else { p };
    info!("detected period {p}");
    Ok(Some(p))
}

/// Learning rate for a 1-based epoch.
pub fn lr_at(cfg: &Config, epoch: usize) -> f64 {
    let decayed = epoch.saturating_sub(cfg.decay_after + 1);
    cfg.lr * cfg.lr_decay.powi(decayed as i32)
}

/// Batches of window indices for one epoch: shuffled, remainder dropped.
/// When there are fewer windows than a batch, all of them form one batch.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    if n < batch {
        return vec![order];
    }
    order.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

fn mse_loss(g: &mut Graph, pred: crate::tensor::Var, target: &Tensor) -> Result<crate::tensor::Var> {
    let y = g.constant(target.clone());
    let diff = g.sub(pred, y)?;
    let sq = g.square(diff)?;
    g.mean_all(sq)
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Trains a fresh model on `splits.train`, early-stopping on validation
/// MSE (training loss when the validation segment holds no window).
pub fn train(cfg: &Config, splits: &Splits) -> Result<TrainOutcome> {
    let period = resolve_period(cfg, &splits.train)?;
    let model = TriTs::new(cfg, splits.train.channels(), period)?;
    train_model(model, splits)
}

/// Trains an already constructed model.
pub fn train_model(mut model: TriTs, splits: &Splits) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    let start = Instant::now();
    let (l, t) = (cfg.lookback, cfg.horizon);
    let train_w = Windows::new(&splits.train, l, t, cfg.stride)?;
    if train_w.is_empty() {
        return Err(Error::Contract(format!(
            "training segment of {} rows holds no window of {l}+{t}",
            splits.train.rows()
        )));
    }
    let val_w = Windows::new(&splits.val, l, t, 1)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(10);

    let mut history = Vec::new();
    let mut best = (0usize, f64::INFINITY, model.params.clone());
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let lr = lr_at(&cfg, epoch);
        adam.set_lr(lr);
        let batches = epoch_batches(train_w.len(), cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut abs_sum = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let wb = train_w.batch(idx)?;
            let diverged = |loss: f64| Error::Diverged {
                epoch,
                batch: bi,
                loss,
                last_good: Box::new(best.2.clone()),
            };
            let mut g = Graph::new();
            let pass = match model.forward(&mut g, &wb.x) {
                Ok(p) => p,
                Err(Error::NumericalInstability { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let loss = mse_loss(&mut g, pass.output, &wb.y)?;
            let lv = g.value(loss).item()?;
            let mae = mean_abs_diff(g.value(pass.output), &wb.y);
            if !lv.is_finite() {
                return Err(diverged(lv));
            }
            g.backward_into(loss, &mut model.params)?;
            model.params.clip_grad_norm(cfg.clip_norm);
            adam.step(&mut model.params)?;
            loss_sum += lv;
            abs_sum += mae;
        }
        let train_mse = loss_sum / batches.len() as f64;
        let train_mae = abs_sum / batches.len() as f64;
        let val = if val_w.is_empty() {
            None
        } else {
            Some(evaluate_windows(&model, &val_w, "val", cfg.batch_size, false)?)
        };
        let score = val.as_ref().map_or(train_mse, |v| v.report.mse);
        history.push(EpochRecord {
            epoch,
            lr,
            train_mse,
            train_mae,
            val_mse: val.as_ref().map(|v| v.report.mse),
            val_mae: val.as_ref().map(|v| v.report.mae),
            seconds: t0.elapsed().as_secs_f64(),
        });
        info!("epoch {epoch}: train {train_mse:.6} score {score:.6} lr {lr:e}");
        if score < best.1 {
            best = (epoch, score, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_score, params) = best;
    if best_epoch > 0 {
        model.params = params;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_score,
        stopped_early,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn evaluate_windows(
    model: &TriTs,
    windows: &Windows<'_>,
    split: &str,
    batch: usize,
    keep_predictions: bool,
) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Contract(format!("split `{split}` holds no window")));
    }
    let start = Instant::now();
    let (t, c) = (windows.horizon, windows.channels());
    let mut sums = ErrorSums::new(t);
    let mut gates = GateReport::new();
    let mut predictions = Vec::new();
    let mut window_id = 0;
    for wb in windows.iter_batches(batch) {
        let wb = wb?;
        let p = model.predict(&wb.x)?;
        gates.add(&p.gates)?;
        let (yt, yp) = (wb.y.data(), p.output.data());
        for i in 0..yt.len() {
            let step = (i / c) % t;
            sums.add(step, yt[i], yp[i]);
            if keep_predictions {
                predictions.push(PredictionRow {
                    window: window_id + i / (t * c),
                    step,
                    channel: i % c,
                    y_true: yt[i],
                    y_pred: yp[i],
                });
            }
        }
        window_id += wb.len();
    }
    Ok(Evaluation {
        report: sums.report(split, windows.len(), start.elapsed().as_secs_f64(), model.num_parameters()),
        gates: gates.finish()?,
        predictions,
    })
}

/// Metrics of `model` on every stride-1 window of `ds`.
pub fn evaluate(model: &TriTs, ds: &Dataset, split: &str, keep_predictions: bool) -> Result<Evaluation> {
    if ds.channels() != model.channels {
        return Err(Error::CheckpointMismatch(format!(
            "model has {} channels, split `{split}` has {}",
            model.channels,
            ds.channels()
        )));
    }
    let w = Windows::new(ds, model.config.lookback, model.config.horizon, 1)?;
    evaluate_windows(model, &w, split, model.config.batch_size, keep_predictions)
}

/// Forecasts every horizon step with the last observed value.
pub fn repeat_last_baseline(ds: &Dataset, lookback: usize, horizon: usize, split: &str) -> Result<MetricReport> {
    let start = Instant::now();
    let w = Windows::new(ds, lookback, horizon, 1)?;
    if w.is_empty() {
        return Err(Error::Contract(format!("split `{split}` holds no window")));
    }
    let mut sums = ErrorSums::new(horizon);
    for &s in w.starts() {
        for step in 0..horizon {
            for ch in 0..ds.channels() {
                sums.add(step, ds.value(s + lookback + step, ch), ds.value(s + lookback - 1, ch));
            }
        }
    }
    Ok(sums.report(split, w.len(), start.elapsed().as_secs_f64(), 0))
}

/// One ablation setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    Without(Modality),
    EqualWeights,
}

impl Variant {
    /// Full model, each branch removed in turn, and fixed equal weights.
    pub const STANDARD: [Variant; 5] = [
        Variant::Full,
        Variant::Without(Modality::Time),
        Variant::Without(Modality::Freq),
        Variant::Without(Modality::Vision),
        Variant::EqualWeights,
    ];

    pub fn label(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::Without(m) => format!("w/o {m} branch"),
            Variant::EqualWeights => "w/o gating".into(),
        }
    }

    pub fn apply(&self, cfg: &Config) -> Result<Config> {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::Without(m) => c.set_enabled(*m, false),
            Variant::EqualWeights => c.gating = false,
        }
        if c.enabled().is_empty() {
            return Err(Error::Config(format!(
                "variant `{}` leaves no branch enabled",
                self.label()
            )));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub best_epoch: usize,
    pub report: MetricReport,
}

/// Trains and evaluates each variant with the same seed and schedule,
/// running up to `threads` variants at once. Rows follow `variants`.
pub fn ablate(cfg: &Config, splits: &Splits, variants: &[Variant], threads: usize) -> Result<Vec<AblationRow>> {
    let configs = variants
        .iter()
        .map(|v| v.apply(cfg))
        .collect::<Result<Vec<_>>>()?;
    // one period for every variant, detected before any branch is removed
    let period = resolve_period(&Config { vision_enabled: true, ..cfg.clone() }, &splits.train)?;
    let eval_split = ["test", "val", "train"]
        .into_iter()
        .find(|s| {
            splits.get(s).is_some_and(|d| d.rows() >= cfg.lookback + cfg.horizon)
        })
        .unwrap_or("train");
    let run = |variant: Variant, c: &Config| -> Result<AblationRow> {
        let model = TriTs::new(c, splits.train.channels(), period)?;
        let out = train_model(model, splits)?;
        let ds = splits.get(eval_split).expect("known split");
        let eval = evaluate(&out.model, ds, eval_split, false)?;
        info!("{}: mse {:.6}", variant.label(), eval.report.mse);
        Ok(AblationRow {
            variant,
            best_epoch: out.best_epoch,
            report: eval.report,
        })
    };
    let threads = threads.max(1);
    let jobs: Vec<(Variant, &Config)> = variants.iter().copied().zip(&configs).collect();
    let mut rows = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(threads) {
        let results: Vec<Result<AblationRow>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(v, c)| s.spawn(move || run(*v, c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        });
        for r in results {
            rows.push(r?);
        }
    }
    Ok(rows)
}

//! CSV ingestion, chronological splits, sliding windows and dataset
//! statistics.

use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A multivariate series with one row per time step, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    values: Vec<f64>,
    channels: usize,
    pub timestamps: Option<Vec<String>>,
    pub channel_names: Vec<String>,
}

impl Dataset {
    /// `values` is row-major `[rows, channel_names.len()]`; zero rows is allowed.
    pub fn new(name: impl Into<String>, values: Vec<f64>, channel_names: Vec<String>) -> Result<Self> {
        let channels = channel_names.len();
        if channels == 0 || values.len() % channels != 0 {
            return Err(Error::Format(format!(
                "{} values do not fill rows of {channels} channels",
                values.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            values,
            channels,
            timestamps: None,
            channel_names,
        })
    }

    /// Builds a dataset from per-channel columns of equal length.
    pub fn from_columns(name: impl Into<String>, columns: &[Vec<f64>]) -> Result<Self> {
        let channels = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if channels == 0 || columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Format("columns must be non-empty and equally long".into()));
        }
        let values = (0..rows * channels)
            .map(|i| columns[i % channels][i / channels])
            .collect();
        let names = (0..channels).map(|c| format!("ch{c}")).collect();
        Self::new(name, values, names)
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `[rows, channels]`; fails for an empty dataset.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new([self.rows(), self.channels], self.values.clone())
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels + channel]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.value(r, channel)).collect()
    }

    /// Rows `[start, start + len)`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Dataset> {
        if start + len > self.rows() {
            return Err(Error::Bounds(format!(
                "segment [{start}, {}) outside {} rows",
                start + len,
                self.rows()
            )));
        }
        let c = self.channels;
        Ok(Dataset {
            name: self.name.clone(),
            values: self.values[start * c..(start + len) * c].to_vec(),
            channels: c,
            timestamps: self
                .timestamps
                .as_ref()
                .map(|ts| ts[start..start + len].to_vec()),
            channel_names: self.channel_names.clone(),
        })
    }

    /// Every value multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Dataset {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= k);
        out
    }
}

/// Reads a header-first CSV whose `date_column` holds timestamps and whose
/// remaining columns are numeric channels.
pub fn load_csv(path: impl AsRef<Path>, date_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Format(format!("{}: empty file", path.display())));
    }
    let date_idx = headers
        .iter()
        .position(|h| h == date_column)
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: header has no `{date_column}` column",
                path.display()
            ))
        })?;
    let channel_idx: Vec<usize> = (0..headers.len()).filter(|&i| i != date_idx).collect();
    if channel_idx.is_empty() {
        return Err(Error::Format(format!("{}: no numeric columns", path.display())));
    }
    let channel_names = channel_idx.iter().map(|&i| headers[i].to_string()).collect();

    let mut values = Vec::new();
    let mut stamps = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                column: String::new(),
                reason: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        stamps.push(record[date_idx].to_string());
        for &c in &channel_idx {
            let cell = &record[c];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                column: headers[c].to_string(),
                reason: format!("cannot parse `{cell}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: headers[c].to_string(),
                    reason: format!("non-finite value `{cell}`"),
                });
            }
            values.push(v);
        }
    }
    if stamps.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = Dataset::new(name, values, channel_names)?;
    ds.timestamps = Some(stamps);
    Ok(ds)
}

/// Row counts of the three chronological segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }

    /// Standard LTSF borders: 12/4/4 months for the ETT hourly and
    /// 15-minute sets, 70/10/20 for everything else.
    pub fn benchmark(name: &str, rows: usize) -> Self {
        let lower = name.to_ascii_lowercase();
        let month = if lower.starts_with("etth") {
            Some(30 * 24)
        } else if lower.starts_with("ettm") {
            Some(30 * 24 * 4)
        } else {
            None
        };
        match month {
            Some(m) if rows >= 20 * m => Self::new(12 * m, 4 * m, 4 * m),
            _ => {
                let train = (rows as f64 * 0.7) as usize;
                let test = (rows as f64 * 0.2) as usize;
                Self::new(train, rows - train - test, test)
            }
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Forecast-origin counts `(train, val, test)` for lookback `l` when the
    /// validation and test segments carry `l` rows of leading context; this
    /// is the "dataset size" convention of the common benchmark tables.
    pub fn sample_counts(&self, lookback: usize) -> (usize, usize, usize) {
        let count = |rows: usize| (rows + 1).saturating_sub(lookback);
        (
            count(self.train),
            count(self.val + lookback),
            count(self.test + lookback),
        )
    }
}

/// Cuts train / val / test. Validation and test are extended backwards by
/// `context` rows so their first forecast origin sits on the boundary.
pub fn split(ds: &Dataset, spec: SplitSpec, context: usize) -> Result<(Dataset, Dataset, Dataset)> {
    if spec.total() > ds.rows() {
        return Err(Error::Bounds(format!(
            "split {}+{}+{} exceeds {} rows",
            spec.train,
            spec.val,
            spec.test,
            ds.rows()
        )));
    }
    if spec.train == 0 {
        return Err(Error::Bounds("train segment must be non-empty".into()));
    }
    let train = ds.segment(0, spec.train)?;
    let cut = |start: usize, len: usize| -> Result<Dataset> {
        if len == 0 {
            return ds.segment(start, 0);
        }
        let from = start.saturating_sub(context);
        ds.segment(from, start + len - from)
    };
    let val = cut(spec.train, spec.val)?;
    let test = cut(spec.train + spec.val, spec.test)?;
    Ok((train, val, test))
}

/// Per-channel z-score fitted on one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let n = ds.rows() as f64;
        let (mean, std) = (0..ds.channels())
            .map(|c| {
                let col = ds.column(c);
                let m = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                let s = var.sqrt();
                (m, if s > 0.0 { s } else { 1.0 })
            })
            .unzip();
        Self { mean, std }
    }

    /// Maps a standardized value of `channel` back to original units.
    pub fn inverse(&self, channel: usize, value: f64) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }

    pub fn transform(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        let c = ds.channels();
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        out
    }
}

/// A batch of lookback / target pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[B, L, C]`
    pub x: Tensor,
    /// `[B, T, C]`
    pub y: Tensor,
    /// Start row of each lookback window.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Sliding-window index over one dataset segment.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    ds: &'a Dataset,
    pub lookback: usize,
    pub horizon: usize,
    starts: Vec<usize>,
    pub warning: Option<String>,
}

impl<'a> Windows<'a> {
    pub fn new(ds: &'a Dataset, lookback: usize, horizon: usize, stride: usize) -> Result<Self> {
        if lookback == 0 || horizon == 0 || stride == 0 {
            return Err(Error::Contract(
                "lookback, horizon and stride must be positive".into(),
            ));
        }
        let rows = ds.rows();
        let span = lookback + horizon;
        let (starts, warning) = if rows < span {
            let msg = format!(
                "{}: {rows} rows cannot hold a window of {lookback}+{horizon}",
                ds.name
            );
            warn!("{msg}");
            (Vec::new(), Some(msg))
        } else {
            ((0..=rows - span).step_by(stride).collect(), None)
        };
        Ok(Self {
            ds,
            lookback,
            horizon,
            starts,
            warning,
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn channels(&self) -> usize {
        self.ds.channels()
    }

    /// Gathers the windows at positions `indices` (into [`Self::starts`]).
    pub fn batch(&self, indices: &[usize]) -> Result<WindowBatch> {
        let c = self.ds.channels();
        let (l, t) = (self.lookback, self.horizon);
        let data = self.ds.values();
        let mut x = Vec::with_capacity(indices.len() * l * c);
        let mut y = Vec::with_capacity(indices.len() * t * c);
        let mut starts = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = *self.starts.get(i).ok_or_else(|| {
                Error::Bounds(format!("window {i} of {}", self.starts.len()))
            })?;
            x.extend_from_slice(&data[s * c..(s + l) * c]);
            y.extend_from_slice(&data[(s + l) * c..(s + l + t) * c]);
            starts.push(s);
        }
        if indices.is_empty() {
            return Err(Error::Contract("empty window batch".into()));
        }
        Ok(WindowBatch {
            x: Tensor::new([indices.len(), l, c], x)?,
            y: Tensor::new([indices.len(), t, c], y)?,
            starts,
        })
    }

    /// Chronological batches of at most `batch` windows.
    pub fn iter_batches(&self, batch: usize) -> impl Iterator<Item = Result<WindowBatch>> + '_ {
        let batch = batch.max(1);
        let n = self.len();
        (0..n)
            .step_by(batch)
            .map(move |s| self.batch(&(s..(s + batch).min(n)).collect::<Vec<_>>()))
    }
}

/// Chronological stream of window batches over `ds`.
pub fn make_windows(
    ds: &Dataset,
    lookback: usize,
    horizon: usize,
    stride: usize,
    batch: usize,
) -> Result<(Vec<WindowBatch>, Option<String>)> {
    let w = Windows::new(ds, lookback, horizon, stride)?;
    let batches = w.iter_batches(batch).collect::<Result<Vec<_>>>()?;
    Ok((batches, w.warning.clone()))
}

/// Centered simple moving average over complete windows only: entry `i`
/// averages `x[i .. i + window]`.
fn valid_sma(x: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() + 1 - window);
    let mut acc: f64 = x[..window].iter().sum();
    out.push(acc / window as f64);
    for i in window..x.len() {
        acc += x[i] - x[i - window];
        out.push(acc / window as f64);
    }
    out
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
}

/// Mean over channels of `var(season) / var(trend)`, where the trend is a
/// simple moving average of `sma_window` samples and the season is the
/// residual on the rows the average covers. A channel whose trend has no
/// variance yields `+inf`.
pub fn season_trend_cov_ratio(ds: &Dataset, sma_window: usize) -> Result<f64> {
    if sma_window < 2 || sma_window >= ds.rows() {
        return Err(Error::Contract(format!(
            "sma window {sma_window} must be in [2, {}]",
            ds.rows()
        )));
    }
    let half = (sma_window - 1) / 2;
    let mut total = 0.0;
    for c in 0..ds.channels() {
        let x = ds.column(c);
        let trend = valid_sma(&x, sma_window);
        let season: Vec<f64> = trend
            .iter()
            .enumerate()
            .map(|(i, t)| x[i + half] - t)
            .collect();
        let vt = variance(&trend);
        let energy = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        if vt <= 1e-24 * energy.max(f64::MIN_POSITIVE) {
            warn!(
                "{}: channel {} has a flat trend; covariance ratio is infinite",
                ds.name, ds.channel_names[c]
            );
            return Ok(f64::INFINITY);
        }
        total += variance(&season) / vt;
    }
    Ok(total / ds.channels() as f64)
}

/// Summary row for a dataset: width, split sizes and covariance ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub name: String,
    pub dim: usize,
    pub rows: usize,
    /// Segment rows of the benchmark split.
    pub split_rows: (usize, usize, usize),
    /// Forecast origins per segment at the given lookback.
    pub samples: (usize, usize, usize),
    pub cov_ratio: f64,
}

pub fn dataset_stats(ds: &Dataset, lookback: usize, sma_window: usize) -> Result<DatasetStats> {
    let spec = SplitSpec::benchmark(&ds.name, ds.rows());
    Ok(DatasetStats {
        name: ds.name.clone(),
        dim: ds.channels(),
        rows: ds.rows(),
        split_rows: (spec.train, spec.val, spec.test),
        samples: spec.sample_counts(lookback),
        cov_ratio: season_trend_cov_ratio(ds, sma_window)?,
    })
}

/// Parameters of a sine-plus-linear-trend test series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub channels: usize,
    pub period: f64,
    pub amplitude: f64,
    pub slope: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            rows: 2000,
            channels: 1,
            period: 24.0,
            amplitude: 1.0,
            slope: 0.002,
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

/// `amplitude * sin(2 pi t / period + phase_c) + slope * t + noise`, with
/// channel `c` shifted in phase by `c * pi / 3`.
pub fn synthetic_sine_trend(spec: &SyntheticSpec) -> Result<Dataset> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    let noise = Normal::new(0.0, spec.noise_sd)
        .map_err(|e| Error::Config(format!("noise sd {}: {e}", spec.noise_sd)))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let columns: Vec<Vec<f64>> = (0..spec.channels)
        .map(|c| {
            let phase = c as f64 * std::f64::consts::PI / 3.0;
            (0..spec.rows)
                .map(|t| {
                    let t = t as f64;
                    let clean = spec.amplitude
                        * (2.0 * std::f64::consts::PI * t / spec.period + phase).sin()
                        + spec.slope * t;
                    if spec.noise_sd > 0.0 {
                        clean + noise.sample(&mut rng)
                    } else {
                        clean
                    }
                })
                .collect()
        })
        .collect();
    Dataset::from_columns("synthetic", &columns)
}

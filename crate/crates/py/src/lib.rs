//! Python bindings. Arrays cross the boundary as nested lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trits_core::config::Config as CoreConfig;
use trits_core::dataio::{dataset_stats, load_csv, season_trend_cov_ratio, Dataset};
use trits_core::freq::{wavedec as core_wavedec, waverec as core_waverec, WaveletFilter};
use trits_core::model::TriTs;
use trits_core::tensor::{Graph, Tensor};
use trits_core::time_branch::{ema_decompose, EmaConfig};
use trits_core::trainer::{self, Splits};
use trits_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::NumericalInstability { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn filter(name: &str) -> PyResult<WaveletFilter> {
    Ok(WaveletFilter::new(name.parse().map_err(py_err)?))
}

/// `[B][L][C]` nested lists to a tensor.
fn tensor3(x: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor> {
    let b = x.len();
    let l = x.first().map_or(0, Vec::len);
    let c = x.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(b * l * c);
    for sample in &x {
        if sample.len() != l {
            return Err(PyValueError::new_err("ragged input: samples differ in length"));
        }
        for row in sample {
            if row.len() != c {
                return Err(PyValueError::new_err("ragged input: rows differ in width"));
            }
            data.extend_from_slice(row);
        }
    }
    Tensor::new([b, l, c], data).map_err(py_err)
}

fn nested3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    let (l, c) = (s[1], s[2]);
    t.data()
        .chunks(l * c)
        .map(|sample| sample.chunks(c).map(<[f64]>::to_vec).collect())
        .collect()
}

/// Flat `key = value` configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => CoreConfig::from_text(t).map_err(py_err)?,
            None => CoreConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::load(path).map_err(py_err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn get(&self, key: &str) -> Option<String> {
        self.inner.get(key)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(lookback={}, horizon={}, branches={:?})",
            self.inner.lookback,
            self.inner.horizon,
            self.inner.enabled().iter().map(|m| m.as_str()).collect::<Vec<_>>()
        )
    }
}

/// The forecaster.
#[pyclass(name = "Model")]
struct PyModel {
    inner: TriTs,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, channels, period = None))]
    fn new(config: &PyConfig, channels: usize, period: Option<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: TriTs::new(&config.inner, channels, period).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(config: &PyConfig, channels: usize, path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TriTs::load(&config.inner, channels, path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    /// Forecast `[B][T][C]` for `x: [B][L][C]`, plus per-branch gate weights.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        x: Vec<Vec<Vec<f64>>>,
    ) -> PyResult<(Vec<Vec<Vec<f64>>>, Bound<'py, PyDict>)> {
        let p = self.inner.predict(&tensor3(x)?).map_err(py_err)?;
        let gates = PyDict::new(py);
        for (m, w) in &p.gates {
            gates.set_item(m.as_str(), nested3(w))?;
        }
        Ok((nested3(&p.output), gates))
    }
}

/// Multi-level decomposition `[A_m, D_m, ..., D_1]`.
#[pyfunction]
fn wavedec(x: Vec<f64>, wavelet: &str, levels: usize) -> PyResult<Vec<Vec<f64>>> {
    let f = filter(wavelet)?;
    f.check_levels(x.len(), levels).map_err(py_err)?;
    Ok(core_wavedec(&x, &f, levels))
}

/// Inverse of `wavedec` for a signal of length `n`.
#[pyfunction]
fn waverec(coeffs: Vec<Vec<f64>>, wavelet: &str, n: usize) -> PyResult<Vec<f64>> {
    let f = filter(wavelet)?;
    let lengths = f.level_lengths(n, coeffs.len().saturating_sub(1));
    core_waverec(&coeffs, &f, &lengths).map_err(py_err)
}

/// Dominant period of one series.
#[pyfunction]
fn detect_period(x: Vec<f64>) -> PyResult<usize> {
    let n = x.len();
    let t = Tensor::new([1, n, 1], x).map_err(py_err)?;
    trits_core::vision::detect_period(&t).map_err(py_err)
}

/// Exponential moving average trend of one series.
#[pyfunction]
#[pyo3(signature = (x, alpha = 0.3))]
fn ema_trend(x: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let cfg = EmaConfig::new(alpha).map_err(py_err)?;
    let n = x.len();
    let mut g = Graph::new();
    let v = g.constant(Tensor::new([1, n, 1], x).map_err(py_err)?);
    let trend = ema_decompose(&mut g, v, cfg).map_err(py_err)?;
    Ok(g.value(trend).data().to_vec())
}

/// Seasonal-to-trend variance ratio of column-major data.
#[pyfunction]
#[pyo3(signature = (columns, sma_window = 25))]
fn season_trend_ratio(columns: Vec<Vec<f64>>, sma_window: usize) -> PyResult<f64> {
    let ds = Dataset::from_columns("columns", &columns).map_err(py_err)?;
    season_trend_cov_ratio(&ds, sma_window).map_err(py_err)
}

/// Width, split sizes and covariance ratio of a CSV file.
#[pyfunction]
#[pyo3(signature = (path, lookback = 96, sma_window = 25, date_column = "date"))]
fn stats<'py>(
    py: Python<'py>,
    path: PathBuf,
    lookback: usize,
    sma_window: usize,
    date_column: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let ds = load_csv(path, date_column).map_err(py_err)?;
    let s = dataset_stats(&ds, lookback, sma_window).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("name", s.name)?;
    d.set_item("dim", s.dim)?;
    d.set_item("rows", s.rows)?;
    d.set_item("samples", s.samples)?;
    d.set_item("cov_ratio", s.cov_ratio)?;
    Ok(d)
}

/// Trains on a CSV file with the benchmark split. Returns the trained
/// model and a dict with the per-epoch history and test metrics.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig, path: PathBuf) -> PyResult<(PyModel, Bound<'py, PyDict>)> {
    let cfg = &config.inner;
    let ds = load_csv(path, &cfg.date_column).map_err(py_err)?;
    let spec = trits_core::dataio::SplitSpec::benchmark(&ds.name, ds.rows());
    let splits = Splits::prepare(&ds, spec, cfg.lookback).map_err(py_err)?;
    let out = py
        .detach(|| trainer::train(cfg, &splits))
        .map_err(py_err)?;
    let info = PyDict::new(py);
    let history: Vec<(usize, f64, Option<f64>)> = out
        .history
        .iter()
        .map(|h| (h.epoch, h.train_mse, h.val_mse))
        .collect();
    info.set_item("history", history)?;
    info.set_item("best_epoch", out.best_epoch)?;
    info.set_item("stopped_early", out.stopped_early)?;
    for name in ["val", "test"] {
        let split = splits.get(name).expect("known split");
        if split.rows() >= cfg.lookback + cfg.horizon {
            let e = trainer::evaluate(&out.model, split, name, false).map_err(py_err)?;
            info.set_item(format!("{name}_mse"), e.report.mse)?;
            info.set_item(format!("{name}_mae"), e.report.mae)?;
        }
    }
    Ok((PyModel { inner: out.model }, info))
}

#[pymodule]
fn trits(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(wavedec, m)?)?;
    m.add_function(wrap_pyfunction!(waverec, m)?)?;
    m.add_function(wrap_pyfunction!(detect_period, m)?)?;
    m.add_function(wrap_pyfunction!(ema_trend, m)?)?;
    m.add_function(wrap_pyfunction!(season_trend_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(stats, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

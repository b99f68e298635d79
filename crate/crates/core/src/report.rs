//! CSV artifacts written by training runs and read back by the plot and
//! evaluation commands. Every file has a header row and floats are written
//! in shortest round-trip form, so reading a file back is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Modality;
use crate::trainer::{EpochRecord, MetricReport, PredictionRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub split: String,
    pub modality: String,
    pub mean_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub window_id: usize,
    pub step: usize,
    pub channel: usize,
    pub y_true: f64,
    pub y_pred: f64,
}

/// Plot-ready point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: String,
    pub y: f64,
    pub series: String,
}

impl From<&PredictionRow> for PredictionRecord {
    fn from(r: &PredictionRow) -> Self {
        Self {
            window_id: r.window,
            step: r.step,
            channel: r.channel,
            y_true: r.y_true,
            y_pred: r.y_pred,
        }
    }
}

/// Per-epoch train and val rows followed by one row per final report,
/// stamped with `best_epoch`.
pub fn metric_rows(history: &[EpochRecord], best_epoch: usize, finals: &[MetricReport]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for h in history {
        rows.push(MetricRow {
            epoch: h.epoch,
            split: "train".into(),
            mse: h.train_mse,
            mae: h.train_mae,
        });
        if let (Some(mse), Some(mae)) = (h.val_mse, h.val_mae) {
            rows.push(MetricRow {
                epoch: h.epoch,
                split: "val".into(),
                mse,
                mae,
            });
        }
    }
    for r in finals {
        rows.push(MetricRow {
            epoch: best_epoch,
            split: format!("best_{}", r.split),
            mse: r.mse,
            mae: r.mae,
        });
    }
    rows
}

pub fn gate_rows(split: &str, gates: &[(Modality, f64)]) -> Vec<GateRow> {
    gates
        .iter()
        .map(|(m, w)| GateRow {
            split: split.to_string(),
            modality: m.to_string(),
            mean_weight: *w,
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads every row of a CSV written by [`write_csv`].
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// MSE and MAE recomputed in one pass over a predictions file.
pub fn stream_metrics(path: impl AsRef<Path>) -> Result<(f64, f64, usize)> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let (mut sq, mut abs, mut n) = (0.0, 0.0, 0usize);
    for row in r.deserialize::<PredictionRecord>() {
        let row = row?;
        let e = row.y_pred - row.y_true;
        sq += e * e;
        abs += e.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Format("predictions file has no rows".into()));
    }
    Ok((sq / n as f64, abs / n as f64, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let rows: Vec<PredictionRecord> = (0..20)
            .map(|i| PredictionRecord {
                window_id: i / 4,
                step: i % 4,
                channel: 0,
                y_true: (i as f64).sin() / 3.0,
                y_pred: 1.0 / (i as f64 + 0.7),
            })
            .collect();
        write_csv(&path, &rows).unwrap();
        let back: Vec<PredictionRecord> = read_csv(&path).unwrap();
        assert_eq!(back, rows);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("window_id,step,channel,y_true,y_pred\n"));
    }

    #[test]
    fn metric_rows_layout() {
        let h = vec![EpochRecord {
            epoch: 1,
            lr: 1e-3,
            train_mse: 0.5,
            train_mae: 0.6,
            val_mse: Some(0.4),
            val_mae: Some(0.3),
            seconds: 1.0,
        }];
        let rows = metric_rows(&h, 1, &[]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].split, "val");
    }

    #[test]
    fn missing_file() {
        assert!(read_csv::<GateRow>("/nonexistent/g.csv").is_err());
    }
}

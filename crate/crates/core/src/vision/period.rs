//! Dominant-period estimation from the autocorrelation function.

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Period used when the input carries no usable autocorrelation.
pub const FALLBACK_PERIOD: usize = 24;

/// Relative tolerance under which two autocorrelation values tie.
const TIE_TOL: f64 = 1e-9;

/// Biased autocorrelation of one mean-removed series for lags
/// `0..=max_lag`, normalized so lag 0 is 1. `None` when the series is flat.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0: f64 = c.iter().map(|v| v * v).sum();
    let scale = x.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if c0 <= 1e-24 * scale {
        return None;
    }
    Some(
        (0..=max_lag.min(n - 1))
            .map(|k| (0..n - k).map(|t| c[t] * c[t + k]).sum::<f64>() / c0)
            .collect(),
    )
}

/// Dominant period of `x: [B, L, C]`: the lag in `[2, L/2]` with the
/// highest local peak of the autocorrelation averaged over samples and
/// channels. Near-ties go to the shorter lag. Without an interior peak the
/// global maximum over the range is used; flat input falls back to
/// [`FALLBACK_PERIOD`].
pub fn detect_period(x: &Tensor) -> Result<usize> {
    let &[b, l, c] = x.shape() else {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected [batch, length, channels]".into(),
        });
    };
    if l < 8 {
        return Err(Error::Contract(format!(
            "period detection needs at least 8 steps, got {l}"
        )));
    }
    let max_lag = l / 2;
    let mut acf = vec![0.0; max_lag + 1];
    let mut used = 0usize;
    let data = x.data();
    for bi in 0..b {
        for ci in 0..c {
            let series: Vec<f64> = (0..l).map(|t| data[(bi * l + t) * c + ci]).collect();
            if let Some(r) = autocorrelation(&series, max_lag) {
                acf.iter_mut().zip(&r).for_each(|(a, v)| *a += v);
                used += 1;
            }
        }
    }
    if used == 0 {
        warn!("flat input; using fallback period {FALLBACK_PERIOD}");
        return Ok(FALLBACK_PERIOD);
    }
    acf.iter_mut().for_each(|a| *a /= used as f64);
    Ok(pick_lag(&acf, 2, max_lag))
}

fn pick_lag(acf: &[f64], lo: usize, hi: usize) -> usize {
    let better = |cand: f64, best: f64| cand > best + TIE_TOL * best.abs().max(1.0);
    let mut best: Option<usize> = None;
    for k in lo..=hi {
        let left = acf[k - 1];
        let right = acf.get(k + 1).copied().unwrap_or(f64::NEG_INFINITY);
        let peak = acf[k] > left && acf[k] >= right;
        if peak && best.is_none_or(|j| better(acf[k], acf[j])) {
            best = Some(k);
        }
    }
    best.unwrap_or_else(|| {
        (lo..=hi).fold(lo, |j, k| if better(acf[k], acf[j]) { k } else { j })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn series(l: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::from_fn([1, l, 1], f)
    }

    #[test]
    fn pure_sines() {
        for p in [7usize, 12, 24, 30] {
            let x = series(8 * p, |t| (2.0 * PI * t as f64 / p as f64).sin());
            assert_eq!(detect_period(&x).unwrap(), p, "period {p}");
        }
    }

    #[test]
    fn flat_input_falls_back() {
        assert_eq!(detect_period(&series(96, |_| 2.5)).unwrap(), FALLBACK_PERIOD);
    }

    #[test]
    fn lag_zero_is_one() {
        let r = autocorrelation(&[1.0, 3.0, 2.0, 5.0], 2).unwrap();
        assert_eq!(r[0], 1.0);
    }

    #[test]
    fn ties_prefer_shorter_lag() {
        let acf = [1.0, 0.0, 0.2, 0.9, 0.1, 0.9, 0.0];
        assert_eq!(pick_lag(&acf, 2, 6), 3);
    }

    #[test]
    fn monotone_acf_uses_global_max() {
        let acf = [1.0, 0.9, 0.8, 0.7, 0.6];
        assert_eq!(pick_lag(&acf, 2, 4), 2);
    }
}

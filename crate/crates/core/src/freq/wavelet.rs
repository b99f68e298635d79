//! Multi-level Mallat DWT/IDWT with half-sample symmetric extension.
//!
//! Coefficient conventions follow the common `symmetric` boundary mode:
//! one analysis level maps `n` samples to `floor((n + taps - 1) / 2)`
//! coefficients per band, and one synthesis level returns
//! `2 * len - taps + 2` samples which are then cropped to the length of the
//! next finer level.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaveletFamily {
    Haar,
    Db2,
}

impl FromStr for WaveletFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(Self::Haar),
            "db2" => Ok(Self::Db2),
            other => Err(Error::Config(format!(
                "unsupported wavelet `{other}` (expected haar or db2)"
            ))),
        }
    }
}

impl fmt::Display for WaveletFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Haar => "haar",
            Self::Db2 => "db2",
        })
    }
}

/// Orthonormal two-channel filter bank.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletFilter {
    pub family: WaveletFamily,
    pub dec_lo: Vec<f64>,
    pub dec_hi: Vec<f64>,
    pub rec_lo: Vec<f64>,
    pub rec_hi: Vec<f64>,
}

impl WaveletFilter {
    pub fn new(family: WaveletFamily) -> Self {
        // reconstruction low-pass taps; the rest follow from the QMF relations
        let rec_lo: Vec<f64> = match family {
            WaveletFamily::Haar => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
            WaveletFamily::Db2 => {
                let s3 = 3f64.sqrt();
                let d = 4.0 * 2f64.sqrt();
                vec![(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d]
            }
        };
        let n = rec_lo.len();
        let dec_lo: Vec<f64> = rec_lo.iter().rev().copied().collect();
        let rec_hi: Vec<f64> = (0..n)
            .map(|k| {
                let v = rec_lo[n - 1 - k];
                if k % 2 == 0 {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let dec_hi: Vec<f64> = rec_hi.iter().rev().copied().collect();
        Self {
            family,
            dec_lo,
            dec_hi,
            rec_lo,
            rec_hi,
        }
    }

    pub fn taps(&self) -> usize {
        self.dec_lo.len()
    }

    /// Coefficient count after one analysis level on `n` samples.
    pub fn coeff_len(&self, n: usize) -> usize {
        (n + self.taps() - 1) / 2
    }

    /// Deepest level whose coarsest band is still at least a filter long.
    pub fn max_level(&self, n: usize) -> usize {
        let f = self.taps() - 1;
        if n < f || f == 0 {
            return 0;
        }
        ((n as f64) / (f as f64)).log2().floor() as usize
    }

    /// `[n, l_1, ..., l_m]`
    pub fn level_lengths(&self, n: usize, levels: usize) -> Vec<usize> {
        let mut out = vec![n];
        for _ in 0..levels {
            let last = *out.last().unwrap();
            out.push(self.coeff_len(last));
        }
        out
    }

    pub fn check_levels(&self, n: usize, levels: usize) -> Result<()> {
        let max = self.max_level(n);
        if levels == 0 || levels > max {
            return Err(Error::Config(format!(
                "{levels} {} levels on length {n}: maximum feasible is {max}",
                self.family
            )));
        }
        Ok(())
    }
}

fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// One analysis level: `(approximation, detail)`.
pub fn dwt_1d(x: &[f64], filter: &WaveletFilter) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let len = filter.coeff_len(n);
    let mut a = vec![0.0; len];
    let mut d = vec![0.0; len];
    for i in 0..len {
        for (j, (lo, hi)) in filter.dec_lo.iter().zip(&filter.dec_hi).enumerate() {
            let v = x[reflect(2 * i as isize + 1 - j as isize, n)];
            a[i] += lo * v;
            d[i] += hi * v;
        }
    }
    (a, d)
}

/// One synthesis level, cropped to `out_len` samples.
pub fn idwt_1d(a: &[f64], d: &[f64], filter: &WaveletFilter, out_len: usize) -> Result<Vec<f64>> {
    if a.len() != d.len() {
        return Err(Error::ShapeMismatch {
            op: "idwt",
            lhs: vec![a.len()],
            rhs: vec![d.len()],
        });
    }
    let f = filter.taps();
    let full = 2 * a.len() + 2 - f;
    if out_len > full {
        return Err(Error::Contract(format!(
            "cannot reconstruct {out_len} samples from {} coefficients",
            a.len()
        )));
    }
    let mut x = vec![0.0; out_len];
    for (n, xn) in x.iter_mut().enumerate() {
        // filter index n + f - 2 - 2i must lie in [0, f)
        let top = n + f - 2;
        let i_min = (top + 1).saturating_sub(f).div_ceil(2);
        let i_max = (top / 2).min(a.len() - 1);
        for i in i_min..=i_max {
            let k = top - 2 * i;
            *xn += a[i] * filter.rec_lo[k] + d[i] * filter.rec_hi[k];
        }
    }
    Ok(x)
}

/// Per-series multi-level decomposition: `[A_m, D_m, ..., D_1]`.
pub fn wavedec(x: &[f64], filter: &WaveletFilter, levels: usize) -> Vec<Vec<f64>> {
    let mut details = Vec::with_capacity(levels);
    let mut approx = x.to_vec();
    for _ in 0..levels {
        let (a, d) = dwt_1d(&approx, filter);
        details.push(d);
        approx = a;
    }
    let mut out = vec![approx];
    out.extend(details.into_iter().rev());
    out
}

/// Inverse of [`wavedec`] onto `lengths = [n, l_1, ..., l_m]`.
pub fn waverec(coeffs: &[Vec<f64>], filter: &WaveletFilter, lengths: &[usize]) -> Result<Vec<f64>> {
    let levels = coeffs.len() - 1;
    if lengths.len() != levels + 1 {
        return Err(Error::Contract(format!(
            "{} coefficient bands need {} level lengths, got {}",
            coeffs.len(),
            levels + 1,
            lengths.len()
        )));
    }
    let mut approx = coeffs[0].clone();
    for (step, detail) in coeffs[1..].iter().enumerate() {
        let level = levels - step;
        if approx.len() != lengths[level] || detail.len() != lengths[level] {
            return Err(Error::ShapeMismatch {
                op: "waverec",
                lhs: vec![approx.len(), detail.len()],
                rhs: vec![lengths[level]],
            });
        }
        approx = idwt_1d(&approx, detail, filter, lengths[level - 1])?;
    }
    Ok(approx)
}

/// Approximation plus per-level details of a `[B, L, C]` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    /// `A_m`, shape `[B, l_m, C]`.
    pub approx: Tensor,
    /// `D_1 .. D_m` (finest first), `D_i` of shape `[B, l_i, C]`.
    pub details: Vec<Tensor>,
    /// `[L, l_1, ..., l_m]`
    pub lengths: Vec<usize>,
}

impl WaveletPyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// All-zero pyramid for a signal of length `n`.
    pub fn zeros(batch: usize, channels: usize, n: usize, filter: &WaveletFilter, levels: usize) -> Self {
        let lengths = filter.level_lengths(n, levels);
        Self {
            approx: Tensor::zeros([batch, lengths[levels], channels]),
            details: (1..=levels)
                .map(|i| Tensor::zeros([batch, lengths[i], channels]))
                .collect(),
            lengths,
        }
    }
}

fn series(x: &Tensor, b: usize, c: usize) -> Vec<f64> {
    let (l, ch) = (x.shape()[1], x.shape()[2]);
    (0..l).map(|t| x.data()[(b * l + t) * ch + c]).collect()
}

fn scatter(out: &mut Tensor, b: usize, c: usize, values: &[f64]) {
    let (l, ch) = (out.shape()[1], out.shape()[2]);
    for (t, v) in values.iter().enumerate() {
        out.data_mut()[(b * l + t) * ch + c] = *v;
    }
}

/// Decomposes each `(batch, channel)` series of `x: [B, L, C]`.
pub fn dwt_multilevel(x: &Tensor, filter: &WaveletFilter, levels: usize) -> Result<WaveletPyramid> {
    if x.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected [batch, length, channels]".into(),
        });
    }
    let (bsz, len, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    filter.check_levels(len, levels)?;
    let mut pyr = WaveletPyramid::zeros(bsz, ch, len, filter, levels);
    for b in 0..bsz {
        for c in 0..ch {
            let bands = wavedec(&series(x, b, c), filter, levels);
            scatter(&mut pyr.approx, b, c, &bands[0]);
            for (k, band) in bands[1..].iter().enumerate() {
                // bands[1] is D_m
                let level = levels - k;
                scatter(&mut pyr.details[level - 1], b, c, band);
            }
        }
    }
    Ok(pyr)
}

/// Reconstructs `[B, target_len, C]` from a pyramid.
pub fn idwt_multilevel(pyr: &WaveletPyramid, filter: &WaveletFilter, target_len: usize) -> Result<Tensor> {
    let levels = pyr.levels();
    let (bsz, ch) = (pyr.approx.shape()[0], pyr.approx.shape()[2]);
    let expected = filter.level_lengths(target_len, levels);
    let mut actual = vec![target_len];
    actual.extend(pyr.details.iter().map(|d| d.shape()[1]));
    if actual != expected || pyr.approx.shape()[1] != expected[levels] {
        return Err(Error::ShapeMismatch {
            op: "idwt_multilevel",
            lhs: actual,
            rhs: expected,
        });
    }
    let mut out = Tensor::zeros([bsz, target_len, ch]);
    for b in 0..bsz {
        for c in 0..ch {
            let mut bands = vec![series(&pyr.approx, b, c)];
            for level in (1..=levels).rev() {
                bands.push(series(&pyr.details[level - 1], b, c));
            }
            let x = waverec(&bands, filter, &expected)?;
            scatter(&mut out, b, c, &x);
        }
    }
    Ok(out)
}

/// Dense matrix of the analysis operator: row `t` holds the coefficients
/// of the unit impulse at `t`, columns ordered `[A_m, D_m, ..., D_1]`.
/// Shape `[n, total_coeffs]`, so `signal_row @ M` is the decomposition.
pub fn analysis_matrix(n: usize, filter: &WaveletFilter, levels: usize) -> Tensor {
    let lengths = filter.level_lengths(n, levels);
    let total: usize = lengths[levels] + lengths[1..].iter().sum::<usize>();
    let mut m = Tensor::zeros([n, total]);
    let mut e = vec![0.0; n];
    for t in 0..n {
        e[t] = 1.0;
        let flat: Vec<f64> = wavedec(&e, filter, levels).concat();
        m.data_mut()[t * total..(t + 1) * total].copy_from_slice(&flat);
        e[t] = 0.0;
    }
    m
}

/// Dense matrix of the synthesis operator onto `n` samples: shape
/// `[total_coeffs, n]` with rows ordered `[A_m, D_m, ..., D_1]`.
pub fn synthesis_matrix(n: usize, filter: &WaveletFilter, levels: usize) -> Result<Tensor> {
    let lengths = filter.level_lengths(n, levels);
    let band_lens: Vec<usize> = std::iter::once(lengths[levels])
        .chain((1..=levels).rev().map(|i| lengths[i]))
        .collect();
    let total: usize = band_lens.iter().sum();
    let mut m = Tensor::zeros([total, n]);
    let mut row = 0;
    for (band, &blen) in band_lens.iter().enumerate() {
        for k in 0..blen {
            let mut bands: Vec<Vec<f64>> = band_lens.iter().map(|&l| vec![0.0; l]).collect();
            bands[band][k] = 1.0;
            let x = waverec(&bands, filter, &lengths)?;
            m.data_mut()[row * n..(row + 1) * n].copy_from_slice(&x);
            row += 1;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const R2: f64 = std::f64::consts::SQRT_2;

    #[test]
    fn haar_hand_values() {
        let f = WaveletFilter::new(WaveletFamily::Haar);
        let (a, d) = dwt_1d(&[1.0, 2.0, 3.0, 4.0], &f);
        assert!((a[0] - 3.0 / R2).abs() < 1e-15 && (a[1] - 7.0 / R2).abs() < 1e-15);
        assert!((d[0] + 1.0 / R2).abs() < 1e-15 && (d[1] + 1.0 / R2).abs() < 1e-15);
    }

    #[test]
    fn constant_kills_details() {
        let f = WaveletFilter::new(WaveletFamily::Haar);
        let (a, d) = dwt_1d(&[2.5; 8], &f);
        assert!(d.iter().all(|v| v.abs() < 1e-15));
        assert!(a.iter().all(|v| (v - R2 * 2.5).abs() < 1e-14));
    }

    #[test]
    fn db2_filter_taps_are_orthonormal() {
        let f = WaveletFilter::new(WaveletFamily::Db2);
        let e: f64 = f.dec_lo.iter().map(|v| v * v).sum();
        assert!((e - 1.0).abs() < 1e-15);
        let s: f64 = f.dec_lo.iter().sum();
        assert!((s - R2).abs() < 1e-15);
        let cross: f64 = f.dec_lo.iter().zip(&f.dec_hi).map(|(a, b)| a * b).sum();
        assert!(cross.abs() < 1e-15);
    }

    #[test]
    fn lengths_and_max_level() {
        let f = WaveletFilter::new(WaveletFamily::Db2);
        assert_eq!(f.level_lengths(96, 3), vec![96, 49, 26, 14]);
        assert_eq!(f.max_level(96), 5);
        assert!(matches!(f.check_levels(8, 3), Err(Error::Config(m)) if m.contains("maximum feasible is 1")));
    }

    #[test]
    fn idwt_rejects_inconsistent_lengths() {
        let f = WaveletFilter::new(WaveletFamily::Haar);
        let mut pyr = WaveletPyramid::zeros(1, 1, 16, &f, 2);
        pyr.details[0] = Tensor::zeros([1, 5, 1]);
        assert!(idwt_multilevel(&pyr, &f, 16).is_err());
    }

    #[test]
    fn matrices_agree_with_direct_transform() {
        let f = WaveletFilter::new(WaveletFamily::Db2);
        let n = 37;
        let x: Vec<f64> = (0..n).map(|t| (t as f64 * 0.41).sin() + 0.05 * t as f64).collect();
        let an = analysis_matrix(n, &f, 3);
        let direct = wavedec(&x, &f, 3).concat();
        let total = direct.len();
        for (j, &dv) in direct.iter().enumerate() {
            let via: f64 = (0..n).map(|t| x[t] * an.data()[t * total + j]).sum();
            assert!((via - dv).abs() < 1e-12);
        }
        let syn = synthesis_matrix(n, &f, 3).unwrap();
        for t in 0..n {
            let via: f64 = (0..total).map(|j| direct[j] * syn.data()[j * n + t]).sum();
            assert!((via - x[t]).abs() < 1e-10);
        }
    }
}

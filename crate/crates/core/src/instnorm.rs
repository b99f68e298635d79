//! Reversible instance normalization over the lookback window.
//!
//! Statistics are taken from the raw input and enter the graph as
//! constants; the learned affine pair is a graph parameter.

use crate::error::{Error, Result};
use crate::nn::ParamBuilder;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Per-window, per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    /// `[B, C]`
    pub mean: Tensor,
    /// Population standard deviation, `[B, C]`.
    pub std: Tensor,
    pub eps: f64,
}

impl InstanceStats {
    /// Statistics of `x: [B, L, C]` along the time axis.
    pub fn of(x: &Tensor, eps: f64) -> Result<Self> {
        let &[b, l, c] = x.shape() else {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "expected [batch, length, channels]".into(),
            });
        };
        if l < 2 {
            return Err(Error::Contract(format!(
                "instance statistics need at least 2 time steps, got {l}"
            )));
        }
        let data = x.data();
        let mut mean = vec![0.0; b * c];
        let mut var = vec![0.0; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let col = (0..l).map(|t| data[(bi * l + t) * c + ci]);
                let m = col.clone().sum::<f64>() / l as f64;
                mean[bi * c + ci] = m;
                var[bi * c + ci] = col.map(|v| (v - m).powi(2)).sum::<f64>() / l as f64;
            }
        }
        Ok(Self {
            mean: Tensor::new([b, c], mean)?,
            std: Tensor::new([b, c], var.into_iter().map(f64::sqrt).collect())?,
            eps,
        })
    }

    fn scale(&self) -> Tensor {
        let mut s = self.std.clone();
        s.data_mut().iter_mut().for_each(|v| *v += self.eps);
        s
    }
}

/// Learned per-channel affine pair applied after standardization.
#[derive(Clone, Copy, Debug)]
pub struct RevIn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub channels: usize,
}

impl RevIn {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, eps: f64) -> Result<Self> {
        let mut pb = pb.scoped("revin");
        Ok(Self {
            gamma: pb.constant("gamma", &[channels], 1.0)?,
            beta: pb.constant("beta", &[channels], 0.0)?,
            eps,
            channels,
        })
    }

    /// `gamma * (x - mean) / (std + eps) + beta`.
    pub fn normalize(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
    ) -> Result<(Var, InstanceStats)> {
        let stats = InstanceStats::of(x, self.eps)?;
        if x.shape()[2] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "revin",
                lhs: x.shape().to_vec(),
                rhs: vec![self.channels],
            });
        }
        let mut neg_mean = stats.mean.clone();
        neg_mean.data_mut().iter_mut().for_each(|v| *v = -*v);
        let inv = Tensor::from_fn(stats.std.shape().to_vec(), |i| {
            1.0 / (stats.std.data()[i] + self.eps)
        });
        let xv = g.input(x.clone());
        let neg_mean = g.constant(neg_mean);
        let z = per_sample(g, xv, neg_mean, Graph::add)?;
        let inv = g.constant(inv);
        let z = per_sample(g, z, inv, Graph::mul)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let z = g.mul(z, gamma)?;
        Ok((g.add(z, beta)?, stats))
    }

    /// Inverse of [`Self::normalize`] applied to a `[B, T, C]` forecast.
    pub fn denormalize(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: Var,
        stats: &InstanceStats,
    ) -> Result<Var> {
        let ys = g.shape(y).to_vec();
        if ys.len() != 3 || [ys[0], ys[2]] != stats.mean.shape() {
            return Err(Error::ShapeMismatch {
                op: "revin_denormalize",
                lhs: ys,
                rhs: stats.mean.shape().to_vec(),
            });
        }
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.sub(y, beta)?;
        let inv_gamma = g.reciprocal(gamma)?;
        let y = g.mul(y, inv_gamma)?;
        let scale = g.constant(stats.scale());
        let y = per_sample(g, y, scale, Graph::mul)?;
        let mean = g.constant(stats.mean.clone());
        per_sample(g, y, mean, Graph::add)
    }
}

/// Combines `x: [B, T, C]` with a per-sample factor `f: [B, C]`.
pub(crate) fn per_sample(
    g: &mut Graph,
    x: Var,
    f: Var,
    combine: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Var> {
    // [B, T, C] -> [T, B, C] so `[B, C]` is a trailing suffix
    let xt = g.permute(x, &[1, 0, 2])?;
    let y = combine(g, xt, f)?;
    g.permute(y, &[1, 0, 2])
}

//! Time branch: exponential-moving-average trend followed by a linear map
//! from the lookback to the horizon, shared across channels.

use crate::error::{Error, Result};
use crate::nn::{Linear, LinearInit, ParamBuilder};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Smoothing factor of the trend filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaConfig {
    pub alpha: f64,
}

impl EmaConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "time.alpha must lie strictly between 0 and 1, got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { alpha: 0.3 }
    }
}

/// Trend of `x: [B, L, C]` along time, seeded with the first sample:
/// `trend[0] = x[0]`, `trend[t] = alpha * x[t] + (1 - alpha) * trend[t-1]`.
pub fn ema_decompose(g: &mut Graph, x: Var, cfg: EmaConfig) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let &[_, l, c] = shape.as_slice() else {
        return Err(Error::InvalidShape {
            shape,
            reason: "expected [batch, length, channels]".into(),
        });
    };
    let a = cfg.alpha;
    let weight = g.constant(Tensor::from_fn([l, c], |i| if i < c { 1.0 } else { a }));
    let drive = g.mul(x, weight)?;
    let decay = g.constant(Tensor::from_fn(shape.clone(), |i| {
        if (i / c) % l == 0 {
            0.0
        } else {
            1.0 - a
        }
    }));
    g.scan(decay, drive, 1, false)
}

/// Trend extraction plus the lookback-to-horizon projection.
#[derive(Clone, Copy, Debug)]
pub struct TimeBranch {
    pub ema: EmaConfig,
    pub proj: Linear,
    pub lookback: usize,
    pub horizon: usize,
}

impl TimeBranch {
    pub fn new(pb: &mut ParamBuilder<'_>, lookback: usize, horizon: usize, ema: EmaConfig) -> Result<Self> {
        let mut pb = pb.scoped("time");
        let proj = Linear::new(&mut pb, "proj", lookback, horizon, true, LinearInit::Default)?;
        Ok(Self {
            ema,
            proj,
            lookback,
            horizon,
        })
    }

    /// `x: [B, L, C]` (normalized) to `[B, T, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let trend = ema_decompose(g, x, self.ema)?;
        time_forward(g, store, trend, &self.proj)
    }
}

/// Applies the channel-shared `[L, T]` map to a `[B, L, C]` trend.
pub fn time_forward(g: &mut Graph, store: &ParamStore, trend: Var, proj: &Linear) -> Result<Var> {
    let shape = g.shape(trend).to_vec();
    if shape.len() != 3 || shape[1] != proj.fan_in {
        return Err(Error::ShapeMismatch {
            op: "time_forward",
            lhs: shape,
            rhs: vec![proj.fan_in, proj.fan_out],
        });
    }
    let t = g.permute(trend, &[0, 2, 1])?;
    let y = proj.forward(g, store, t)?;
    g.permute(y, &[0, 2, 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_trend() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 3, 1], vec![1.0, 0.0, 0.0]).unwrap());
        let tr = ema_decompose(&mut g, x, EmaConfig::new(0.5).unwrap()).unwrap();
        assert_eq!(g.value(tr).data(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn constant_series_is_its_own_trend() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([2, 20, 3], -1.25));
        let tr = ema_decompose(&mut g, x, EmaConfig::new(0.3).unwrap()).unwrap();
        assert!(g.value(tr).data().iter().all(|v| (v + 1.25).abs() < 1e-15));
    }

    #[test]
    fn alpha_out_of_range() {
        for a in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(EmaConfig::new(a), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_projection_gives_zero_forecast() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let tb = TimeBranch::new(&mut pb, 12, 5, EmaConfig::default()).unwrap();
        store.get_mut(tb.proj.weight).data_mut().fill(0.0);
        store.get_mut(tb.proj.bias.unwrap()).data_mut().fill(0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 12, 3], |i| i as f64));
        let y = tb.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 3]);
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }
}

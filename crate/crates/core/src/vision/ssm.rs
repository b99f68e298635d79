//! Selective state-space scan and the bidirectional block built on it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, LinearInit, ParamBuilder, RmsNorm};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Scan direction over the token axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Zero-order-hold discretization of a diagonal system, elementwise:
/// `a_bar = exp(delta * a)` and `b_bar = (a_bar - 1) / a * b`, which tends
/// to `delta * b` as `delta * a -> 0`.
pub fn zoh_discretize(a: &[f64], b: &[f64], delta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() || a.len() != delta.len() {
        return Err(Error::ShapeMismatch {
            op: "zoh_discretize",
            lhs: vec![a.len(), b.len()],
            rhs: vec![delta.len()],
        });
    }
    if let Some(i) = delta.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::Contract(format!(
            "step size must be positive, got {} at {i}",
            delta[i]
        )));
    }
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for ((&ai, &bi), &di) in a.iter().zip(b).zip(delta) {
        let z = di * ai;
        a_bar.push(z.exp());
        // expm1(z) / z, continuous at 0
        let ratio = if z.abs() < 1e-12 { 1.0 } else { z.exp_m1() / z };
        b_bar.push(ratio * di * bi);
    }
    Ok((a_bar, b_bar))
}

/// `x: [.., n]` to `[.., k, n]` by repeating along a new second-to-last axis.
fn expand_middle(g: &mut Graph, x: Var, k: usize) -> Result<Var> {
    let mut shape = g.shape(x).to_vec();
    let n = shape.pop().unwrap_or(1);
    let mut col = shape.clone();
    col.extend([n, 1]);
    let x = g.reshape(x, &col)?;
    let ones = g.constant(Tensor::full([1, k], 1.0));
    let rep = g.matmul(x, ones)?;
    let r = col.len();
    g.transpose(rep, r - 2, r - 1)
}

/// `x: [.., k]` to `[.., k, n]` by repeating along a new last axis.
fn expand_last(g: &mut Graph, x: Var, n: usize) -> Result<Var> {
    let mut shape = g.shape(x).to_vec();
    shape.push(1);
    let x = g.reshape(x, &shape)?;
    let ones = g.constant(Tensor::full([1, n], 1.0));
    g.matmul(x, ones)
}

/// Selective scan with input-dependent step, input and output maps.
///
/// Shapes: `u, delta: [B, N, di]`, `a_log: [di, n]`, `b, c: [B, N, n]`.
/// The state matrix is `-exp(a_log)`. Returns `[B, N, di]`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan(
    g: &mut Graph,
    u: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    direction: Direction,
) -> Result<Var> {
    let us = g.shape(u).to_vec();
    let als = g.shape(a_log).to_vec();
    if us.len() != 3 || g.shape(delta) != us.as_slice() || als.len() != 2 || als[0] != us[2] {
        return Err(Error::ShapeMismatch {
            op: "selective_scan",
            lhs: us,
            rhs: als,
        });
    }
    let (di, n) = (als[0], als[1]);
    for v in [b, c] {
        let s = g.shape(v);
        if s.len() != 3 || s[..2] != us[..2] || s[2] != n {
            return Err(Error::ShapeMismatch {
                op: "selective_scan",
                lhs: s.to_vec(),
                rhs: vec![us[0], us[1], n],
            });
        }
    }
    let e = g.exp(a_log)?;
    let a = g.neg(e)?;
    let neg_log = g.neg(a_log)?;
    let e_inv = g.exp(neg_log)?;
    let a_inv = g.neg(e_inv)?;

    let delta_x = expand_last(g, delta, n)?;
    let da = g.mul(delta_x, a)?;
    let a_bar = g.exp(da)?;
    let gain = g.add_scalar(a_bar, -1.0)?;
    let gain = g.mul(gain, a_inv)?;
    let u_x = expand_last(g, u, n)?;
    let b_x = expand_middle(g, b, di)?;
    let drive = g.mul(gain, u_x)?;
    let drive = g.mul(drive, b_x)?;
    let h = g.scan(a_bar, drive, 1, direction == Direction::Backward)?;
    let c_x = expand_middle(g, c, di)?;
    let y = g.mul(h, c_x)?;
    g.sum(y, 3)
}

/// Per-direction input-dependent projections.
#[derive(Clone, Copy, Debug)]
pub struct DirectionParams {
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub skip: ParamId,
}

impl DirectionParams {
    fn new(pb: &mut ParamBuilder<'_>, d_inner: usize, d_state: usize, dt_rank: usize) -> Result<Self> {
        let x_proj = Linear::new(pb, "x_proj", d_inner, dt_rank + 2 * d_state, false, LinearInit::Default)?;
        let dt_bound = (dt_rank as f64).powf(-0.5);
        let weight = pb.uniform("dt_proj.weight", &[dt_rank, d_inner], dt_bound)?;
        // step sizes start log-uniform in [1e-3, 1e-1]
        let rng = &mut *pb.rng;
        let bias = Tensor::from_fn([d_inner], |_| {
            let dt: f64 = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        let bias = pb.tensor("dt_proj.bias", bias)?;
        let skip = pb.constant("skip", &[d_inner], 1.0)?;
        Ok(Self {
            x_proj,
            dt_proj: Linear {
                weight,
                bias: Some(bias),
                fan_in: dt_rank,
                fan_out: d_inner,
            },
            skip,
        })
    }
}

/// Block hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
}

impl BlockConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }
}

/// Pre-norm residual block with a forward and a backward selective scan
/// that share the state matrix and differ in their projections.
#[derive(Clone, Copy, Debug)]
pub struct VimBlock {
    pub cfg: BlockConfig,
    pub norm: RmsNorm,
    pub in_proj: Linear,
    pub a_log: ParamId,
    pub fwd: DirectionParams,
    pub bwd: DirectionParams,
    pub out_proj: Linear,
}

impl VimBlock {
    /// `zero_out` starts the block as the identity map.
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: BlockConfig, zero_out: bool) -> Result<Self> {
        let (d, di, n) = (cfg.d_model, cfg.d_inner(), cfg.d_state);
        let norm = RmsNorm::new(pb, "norm", d, 1e-5)?;
        let in_proj = Linear::new(pb, "in_proj", d, 2 * di, false, LinearInit::Default)?;
        let a_log = pb.tensor(
            "a_log",
            Tensor::from_fn([di, n], |i| ((i % n + 1) as f64).ln()),
        )?;
        let fwd = DirectionParams::new(&mut pb.scoped("fwd"), di, n, cfg.dt_rank())?;
        let bwd = DirectionParams::new(&mut pb.scoped("bwd"), di, n, cfg.dt_rank())?;
        let out_init = if zero_out {
            LinearInit::Zeros
        } else {
            LinearInit::Default
        };
        let out_proj = Linear::new(pb, "out_proj", di, d, false, out_init)?;
        Ok(Self {
            cfg,
            norm,
            in_proj,
            a_log,
            fwd,
            bwd,
            out_proj,
        })
    }

    /// Scan output of one direction for the gated branch input `u`.
    pub fn direction_output(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        u: Var,
        params: &DirectionParams,
        direction: Direction,
    ) -> Result<Var> {
        let (r, n) = (self.cfg.dt_rank(), self.cfg.d_state);
        let proj = params.x_proj.forward(g, store, u)?;
        let dt = g.slice(proj, 2, 0, r)?;
        let b = g.slice(proj, 2, r, n)?;
        let c = g.slice(proj, 2, r + n, n)?;
        let dt = params.dt_proj.forward(g, store, dt)?;
        let delta = g.softplus(dt)?;
        let a_log = g.param(store, self.a_log);
        let y = selective_scan(g, u, delta, a_log, b, c, direction)?;
        let skip = g.param(store, params.skip);
        let su = g.mul(u, skip)?;
        g.add(y, su)
    }

    /// `h: [B, N, d]` to `[B, N, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let di = self.cfg.d_inner();
        let x = self.norm.forward(g, store, h)?;
        let xz = self.in_proj.forward(g, store, x)?;
        let xs = g.slice(xz, 2, 0, di)?;
        let z = g.slice(xz, 2, di, di)?;
        let u = g.silu(xs)?;
        let yf = self.direction_output(g, store, u, &self.fwd, Direction::Forward)?;
        let yb = self.direction_output(g, store, u, &self.bwd, Direction::Backward)?;
        let y = g.add(yf, yb)?;
        let gate = g.silu(z)?;
        let y = g.mul(y, gate)?;
        let out = self.out_proj.forward(g, store, y)?;
        g.add(h, out)
    }
}

/// Runs `blocks` in sequence.
pub fn vim_stack(g: &mut Graph, store: &ParamStore, blocks: &[VimBlock], h: Var) -> Result<Var> {
    blocks.iter().try_fold(h, |h, blk| blk.forward(g, store, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoh_values() {
        let (a, b) = zoh_discretize(&[-1.0], &[1.0], &[std::f64::consts::LN_2]).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15);
        assert!((b[0] - 0.5).abs() < 1e-15);
        let (_, b) = zoh_discretize(&[-1.0], &[1.0], &[1.0]).unwrap();
        assert!((b[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        let (a, b) = zoh_discretize(&[0.0], &[2.0], &[0.5]).unwrap();
        assert_eq!((a[0], b[0]), (1.0, 1.0));
    }

    #[test]
    fn zoh_rejects_nonpositive_step() {
        assert!(matches!(
            zoh_discretize(&[-1.0], &[1.0], &[0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn expansions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 3], |i| i as f64));
        let m = expand_middle(&mut g, x, 4).unwrap();
        assert_eq!(g.shape(m), &[2, 4, 3]);
        assert_eq!(g.value(m).at(&[1, 2, 1]), 4.0);
        let l = expand_last(&mut g, x, 5).unwrap();
        assert_eq!(g.shape(l), &[2, 3, 5]);
        assert_eq!(g.value(l).at(&[1, 2, 4]), 5.0);
    }
}

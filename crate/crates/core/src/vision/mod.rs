//! Vision branch: the lookback is folded by its dominant period into a
//! `[rows, period]` image per channel, cut into square patches and run
//! through a stack of bidirectional selective-scan blocks.

pub mod period;
pub mod ssm;

pub use period::{autocorrelation, detect_period, FALLBACK_PERIOD};
pub use ssm::{selective_scan, vim_stack, zoh_discretize, BlockConfig, Direction, VimBlock};

use crate::error::{Error, Result};
use crate::nn::{Linear, LinearInit, ParamBuilder, RmsNorm};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Rows of the period-folded image and the number of dropped leading steps.
pub fn image_geometry(lookback: usize, period: usize) -> Result<(usize, usize)> {
    if period < 2 || period > lookback {
        return Err(Error::Config(format!(
            "period {period} must lie in [2, {lookback}]"
        )));
    }
    Ok((lookback / period, lookback % period))
}

/// Folds `x: [B, L, C]` into `[B, L/P, P, C]`, dropping the oldest
/// `L mod P` steps so every row holds one full cycle.
pub fn reshape_to_image(g: &mut Graph, x: Var, period: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let &[b, l, c] = shape.as_slice() else {
        return Err(Error::InvalidShape {
            shape,
            reason: "expected [batch, length, channels]".into(),
        });
    };
    let (rows, skip) = image_geometry(l, period)?;
    let kept = if skip > 0 { g.slice(x, 1, skip, rows * period)? } else { x };
    g.reshape(kept, &[b, rows, period, c])
}

/// Inverse of [`reshape_to_image`] on the kept steps: `[B, S, P, C]` back
/// to `[B, S * P, C]`.
pub fn image_to_series(img: &Tensor) -> Result<Tensor> {
    let &[b, s, p, c] = img.shape() else {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: "expected [batch, rows, period, channels]".into(),
        });
    };
    img.clone().reshape([b, s * p, c])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisionConfig {
    /// Side of the square patch.
    pub patch: usize,
    pub depth: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            depth: 2,
            d_model: 64,
            d_state: 16,
            expand: 2,
        }
    }
}

/// Token grid derived from the image size and patch side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub period: usize,
    pub patch: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl TokenGrid {
    pub fn new(lookback: usize, period: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("vision.patch must be positive".into()));
        }
        let (rows, _) = image_geometry(lookback, period)?;
        Ok(Self {
            rows,
            period,
            patch,
            grid_rows: rows.div_ceil(patch),
            grid_cols: period.div_ceil(patch),
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

#[derive(Clone, Debug)]
pub struct VisionBranch {
    pub cfg: VisionConfig,
    pub grid: TokenGrid,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<VimBlock>,
    pub norm: RmsNorm,
    pub head: Linear,
}

impl VisionBranch {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        channels: usize,
        lookback: usize,
        horizon: usize,
        period: usize,
        cfg: VisionConfig,
    ) -> Result<Self> {
        if cfg.depth == 0 || cfg.d_model == 0 || cfg.d_state == 0 || cfg.expand == 0 {
            return Err(Error::Config(
                "vision depth, d_model, d_state and expand must be positive".into(),
            ));
        }
        let grid = TokenGrid::new(lookback, period, cfg.patch)?;
        let mut pb = pb.scoped("vision");
        let d = cfg.d_model;
        let patch_dim = cfg.patch * cfg.patch * channels;
        let embed = Linear::new(&mut pb, "embed", patch_dim, d, true, LinearInit::Default)?;
        let pos = pb.uniform("pos", &[grid.tokens(), d], 0.02)?;
        let block_cfg = BlockConfig {
            d_model: d,
            d_state: cfg.d_state,
            expand: cfg.expand,
        };
        let blocks = (0..cfg.depth)
            .map(|i| VimBlock::new(&mut pb.scoped(&format!("block{i}")), block_cfg, false))
            .collect::<Result<Vec<_>>>()?;
        let norm = RmsNorm::new(&mut pb, "norm", d, 1e-5)?;
        let head = Linear::new(
            &mut pb,
            "head",
            grid.tokens() * d,
            horizon * channels,
            true,
            LinearInit::Default,
        )?;
        Ok(Self {
            cfg,
            grid,
            lookback,
            horizon,
            channels,
            embed,
            pos,
            blocks,
            norm,
            head,
        })
    }

    /// Patch tokens `[B, N, p*p*C]` of a `[B, L, C]` input, row-major over
    /// the zero-padded patch grid.
    pub fn tokenize(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let c = self.channels;
        let grid = self.grid;
        let p = grid.patch;
        let img = reshape_to_image(g, x, grid.period)?;
        let (sp, pp) = (grid.grid_rows * p, grid.grid_cols * p);
        let img = if sp > grid.rows {
            let pad = g.constant(Tensor::zeros([b, sp - grid.rows, grid.period, c]));
            g.concat(&[img, pad], 1)?
        } else {
            img
        };
        let img = if pp > grid.period {
            let pad = g.constant(Tensor::zeros([b, sp, pp - grid.period, c]));
            g.concat(&[img, pad], 2)?
        } else {
            img
        };
        let img = g.reshape(img, &[b, grid.grid_rows, p, grid.grid_cols, p, c])?;
        let img = g.permute(img, &[0, 1, 3, 2, 4, 5])?;
        g.reshape(img, &[b, grid.tokens(), p * p * c])
    }

    /// `x: [B, L, C]` (normalized) to `[B, T, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.lookback || shape[2] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "vision_forward",
                lhs: shape,
                rhs: vec![self.lookback, self.channels],
            });
        }
        let b = shape[0];
        let tokens = self.tokenize(g, x)?;
        let h = self.embed.forward(g, store, tokens)?;
        let pos = g.param(store, self.pos);
        let h = g.add(h, pos)?;
        let h = vim_stack(g, store, &self.blocks, h)?;
        let h = self.norm.forward(g, store, h)?;
        let flat = g.reshape(h, &[b, self.grid.tokens() * self.cfg.d_model])?;
        let y = self.head.forward(g, store, flat)?;
        g.reshape(y, &[b, self.horizon, self.channels])
    }
}

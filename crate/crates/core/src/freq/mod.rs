//! Frequency branch: a multi-level wavelet decomposition of the lookback,
//! one patch-mixing forecaster per coefficient band, and reconstruction of
//! the horizon from the predicted bands.

pub mod wavelet;

pub use wavelet::{
    analysis_matrix, dwt_multilevel, idwt_multilevel, synthesis_matrix, wavedec, waverec,
    WaveletFamily, WaveletFilter, WaveletPyramid,
};

use crate::error::{Error, Result};
use crate::nn::{broadcast_leading, FeedForward, Linear, LinearInit, ParamBuilder};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreqConfig {
    pub wavelet: WaveletFamily,
    pub levels: usize,
    pub patch_len: usize,
    pub d_model: usize,
    /// Stabilizer inside the per-band standard deviation.
    pub eps: f64,
}

impl Default for FreqConfig {
    fn default() -> Self {
        Self {
            wavelet: WaveletFamily::Db2,
            levels: 3,
            patch_len: 16,
            d_model: 32,
            eps: 1e-5,
        }
    }
}

/// Whether a mixer starts as the identity map or with random output weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerInit {
    Random,
    Identity,
}

impl MixerInit {
    fn out_init(self) -> LinearInit {
        match self {
            MixerInit::Random => LinearInit::Default,
            MixerInit::Identity => LinearInit::Zeros,
        }
    }
}

/// Residual MLP across the patch axis of `[.., n_patch, d]`.
#[derive(Clone, Copy, Debug)]
pub struct PatchMixer {
    pub ff: FeedForward,
    pub n_patch: usize,
}

impl PatchMixer {
    pub fn new(pb: &mut ParamBuilder<'_>, n_patch: usize, init: MixerInit) -> Result<Self> {
        let hidden = (2 * n_patch).max(4);
        let ff = FeedForward::new(pb, "patch_mixer", n_patch, hidden, init.out_init())?;
        Ok(Self { ff, n_patch })
    }
}

/// Residual MLP across the embedding axis of `[.., n_patch, d]`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingMixer {
    pub ff: FeedForward,
}

impl EmbeddingMixer {
    pub fn new(pb: &mut ParamBuilder<'_>, d_model: usize, init: MixerInit) -> Result<Self> {
        let ff = FeedForward::new(pb, "embed_mixer", d_model, 2 * d_model, init.out_init())?;
        Ok(Self { ff })
    }
}

/// `z + MLP(z^T)^T` where the MLP runs along the patch axis.
pub fn patch_mixer(g: &mut Graph, store: &ParamStore, z: Var, mixer: &PatchMixer) -> Result<Var> {
    let rank = g.shape(z).len();
    if rank < 2 || g.shape(z)[rank - 2] != mixer.n_patch {
        return Err(Error::ShapeMismatch {
            op: "patch_mixer",
            lhs: g.shape(z).to_vec(),
            rhs: vec![mixer.n_patch],
        });
    }
    let zt = g.transpose(z, rank - 2, rank - 1)?;
    let m = mixer.ff.forward(g, store, zt)?;
    let m = g.transpose(m, rank - 2, rank - 1)?;
    g.add(z, m)
}

/// `z + MLP(z)` along the embedding axis.
pub fn embedding_mixer(g: &mut Graph, store: &ParamStore, z: Var, mixer: &EmbeddingMixer) -> Result<Var> {
    let m = mixer.ff.forward(g, store, z)?;
    g.add(z, m)
}

/// Forecaster for one coefficient band.
#[derive(Clone, Copy, Debug)]
pub struct ResolutionBranch {
    pub in_len: usize,
    pub out_len: usize,
    pub n_patch: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub embed: Linear,
    pub patch_mixer: PatchMixer,
    pub embed_mixer: EmbeddingMixer,
    pub head: Linear,
    pub eps: f64,
}

/// Per-band statistics kept for the inverse normalization.
struct BandStats {
    mean: Var,
    std: Var,
}

impl ResolutionBranch {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        channels: usize,
        in_len: usize,
        out_len: usize,
        cfg: &FreqConfig,
        init: MixerInit,
    ) -> Result<Self> {
        let n_patch = in_len.div_ceil(cfg.patch_len);
        Ok(Self {
            in_len,
            out_len,
            n_patch,
            patch_len: cfg.patch_len,
            d_model: cfg.d_model,
            gamma: pb.constant("gamma", &[channels], 1.0)?,
            beta: pb.constant("beta", &[channels], 0.0)?,
            embed: Linear::new(pb, "embed", cfg.patch_len, cfg.d_model, true, LinearInit::Default)?,
            patch_mixer: PatchMixer::new(pb, n_patch, init)?,
            embed_mixer: EmbeddingMixer::new(pb, cfg.d_model, init)?,
            head: Linear::new(pb, "head", n_patch * cfg.d_model, out_len, true, LinearInit::Default)?,
            eps: cfg.eps,
        })
    }

    /// Normalized band forecast `[B, C, out_len]` plus the band statistics.
    fn predict_normalized(&self, g: &mut Graph, store: &ParamStore, band: Var) -> Result<(Var, BandStats)> {
        let shape = g.shape(band).to_vec();
        let (b, c) = (shape[0], shape[1]);
        let mean = g.mean(band, 2)?;
        let neg = g.neg(mean)?;
        let centered = broadcast_leading(g, band, neg, Graph::add)?;
        let sq = g.square(centered)?;
        let var = g.mean(sq, 2)?;
        let var = g.add_scalar(var, self.eps)?;
        let std = g.sqrt(var)?;
        let inv = g.reciprocal(std)?;
        let z = broadcast_leading(g, centered, inv, Graph::mul)?;
        let z = self.affine(g, store, z, false)?;

        let padded_len = self.n_patch * self.patch_len;
        let z = if padded_len > self.in_len {
            let pad = g.constant(Tensor::zeros([b, c, padded_len - self.in_len]));
            g.concat(&[z, pad], 2)?
        } else {
            z
        };
        let z = g.reshape(z, &[b * c, self.n_patch, self.patch_len])?;
        let z = self.embed.forward(g, store, z)?;
        let z = patch_mixer(g, store, z, &self.patch_mixer)?;
        let z = embedding_mixer(g, store, z, &self.embed_mixer)?;
        let z = g.reshape(z, &[b, c, self.n_patch * self.d_model])?;
        let y = self.head.forward(g, store, z)?;
        Ok((y, BandStats { mean, std }))
    }

    /// Applies (or inverts) the per-channel affine pair on `[B, C, n]`.
    fn affine(&self, g: &mut Graph, store: &ParamStore, x: Var, invert: bool) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let xt = g.permute(x, &[0, 2, 1])?;
        let y = if invert {
            let shifted = g.sub(xt, beta)?;
            let inv = g.reciprocal(gamma)?;
            g.mul(shifted, inv)?
        } else {
            let scaled = g.mul(xt, gamma)?;
            g.add(scaled, beta)?
        };
        g.permute(y, &[0, 2, 1])
    }

    /// Band `[B, C, in_len]` to forecast band `[B, C, out_len]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, band: Var) -> Result<Var> {
        let (y, stats) = self.predict_normalized(g, store, band)?;
        self.denormalize(g, store, y, &stats)
    }

    fn denormalize(&self, g: &mut Graph, store: &ParamStore, y: Var, stats: &BandStats) -> Result<Var> {
        let y = self.affine(g, store, y, true)?;
        let y = broadcast_leading(g, y, stats.std, Graph::mul)?;
        broadcast_leading(g, y, stats.mean, Graph::add)
    }
}

/// The full frequency branch.
#[derive(Clone, Debug)]
pub struct FreqBranch {
    pub cfg: FreqConfig,
    pub filter: WaveletFilter,
    pub lookback: usize,
    pub horizon: usize,
    /// Bands in coefficient order `[A_m, D_m, .., D_1]`.
    pub branches: Vec<ResolutionBranch>,
    analysis: Tensor,
    synthesis: Tensor,
}

impl FreqBranch {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        channels: usize,
        lookback: usize,
        horizon: usize,
        cfg: FreqConfig,
        init: MixerInit,
    ) -> Result<Self> {
        if cfg.patch_len == 0 || cfg.d_model == 0 {
            return Err(Error::Config("freq.patch_len and freq.d_model must be positive".into()));
        }
        let filter = WaveletFilter::new(cfg.wavelet);
        filter.check_levels(lookback, cfg.levels)?;
        filter.check_levels(horizon, cfg.levels)?;
        let in_lens = band_lengths(&filter, lookback, cfg.levels);
        let out_lens = band_lengths(&filter, horizon, cfg.levels);
        let mut pb = pb.scoped("freq");
        let branches = in_lens
            .iter()
            .zip(&out_lens)
            .enumerate()
            .map(|(k, (&i, &o))| {
                let mut pb = pb.scoped(&format!("band{k}"));
                ResolutionBranch::new(&mut pb, channels, i, o, &cfg, init)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            analysis: analysis_matrix(lookback, &filter, cfg.levels),
            synthesis: synthesis_matrix(horizon, &filter, cfg.levels)?,
            filter,
            lookback,
            horizon,
            branches,
        })
    }

    fn bands(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let xt = g.permute(x, &[0, 2, 1])?;
        let analysis = g.constant(self.analysis.clone());
        let coeffs = g.matmul(xt, analysis)?;
        let mut offset = 0;
        self.branches
            .iter()
            .map(|br| {
                let band = g.slice(coeffs, 2, offset, br.in_len)?;
                offset += br.in_len;
                Ok(band)
            })
            .collect()
    }

    fn reconstruct(&self, g: &mut Graph, preds: &[Var]) -> Result<Var> {
        let joined = g.concat(preds, 2)?;
        let synthesis = g.constant(self.synthesis.clone());
        let y = g.matmul(joined, synthesis)?;
        g.permute(y, &[0, 2, 1])
    }

    /// `x: [B, L, C]` to `[B, T, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.lookback {
            return Err(Error::ShapeMismatch {
                op: "freq_forward",
                lhs: shape,
                rhs: vec![self.lookback],
            });
        }
        let bands = self.bands(g, x)?;
        let preds = self
            .branches
            .iter()
            .zip(bands)
            .map(|(br, band)| br.forward(g, store, band))
            .collect::<Result<Vec<_>>>()?;
        self.reconstruct(g, &preds)
    }

    /// Per-band forecasts before the inverse normalization, each
    /// `[B, C, out_len]`, in coefficient order.
    pub fn normalized_band_forecasts(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let bands = self.bands(g, x)?;
        self.branches
            .iter()
            .zip(bands)
            .map(|(br, band)| Ok(br.predict_normalized(g, store, band)?.0))
            .collect()
    }

    /// Horizon signal synthesized from per-band forecasts given in
    /// coefficient order.
    pub fn synthesize(&self, g: &mut Graph, preds: &[Var]) -> Result<Var> {
        self.reconstruct(g, preds)
    }
}

/// Band lengths in coefficient order `[A_m, D_m, .., D_1]`.
pub fn band_lengths(filter: &WaveletFilter, n: usize, levels: usize) -> Vec<usize> {
    let lens = filter.level_lengths(n, levels);
    let mut out = vec![lens[levels]];
    out.extend(lens[1..].iter().rev());
    out
}

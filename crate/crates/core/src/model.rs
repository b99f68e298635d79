//! The assembled forecaster: global instance normalization, up to three
//! branches, fusion, and the inverse normalization.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::freq::{FreqBranch, MixerInit};
use crate::fusion::{equal_weights, fuse, GateNetwork, Modality};
use crate::instnorm::{InstanceStats, RevIn};
use crate::nn::ParamBuilder;
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::time_branch::TimeBranch;
use crate::vision::VisionBranch;

#[derive(Clone, Debug)]
pub struct TriTs {
    pub config: Config,
    pub channels: usize,
    pub period: Option<usize>,
    pub revin: RevIn,
    pub time: Option<TimeBranch>,
    pub freq: Option<FreqBranch>,
    pub vision: Option<VisionBranch>,
    pub gate: Option<GateNetwork>,
    pub params: ParamStore,
}

/// Graph handles from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Denormalized forecast `[B, T, C]`.
    pub output: Var,
    /// Fused forecast before the inverse normalization.
    pub fused: Var,
    pub branches: Vec<(Modality, Var)>,
    pub gates: Vec<(Modality, Var)>,
    pub stats: InstanceStats,
}

/// Numeric result of [`TriTs::predict`].
#[derive(Clone, Debug)]
pub struct Prediction {
    pub output: Tensor,
    pub gates: Vec<(Modality, Tensor)>,
}

/// Each component draws its initial values from its own stream so that
/// switching one branch off leaves the others unchanged.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl TriTs {
    /// Builds a model for `channels` inputs. The vision branch needs a
    /// concrete period: `vision.period` or `period` when the former is 0.
    pub fn new(config: &Config, channels: usize, period: Option<usize>) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::Config("dataset has no channels".into()));
        }
        let (l, t, seed) = (config.lookback, config.horizon, config.seed);
        let mut params = ParamStore::new();

        let mut rng = stream_rng(seed, 0);
        let revin = RevIn::new(&mut ParamBuilder::new(&mut params, &mut rng), channels, config.revin_eps)?;

        let time = if config.time_enabled {
            let mut rng = stream_rng(seed, 1);
            let mut pb = ParamBuilder::new(&mut params, &mut rng);
            Some(TimeBranch::new(&mut pb, l, t, config.ema()?)?)
        } else {
            None
        };
        let freq = if config.freq_enabled {
            let mut rng = stream_rng(seed, 2);
            let mut pb = ParamBuilder::new(&mut params, &mut rng);
            Some(FreqBranch::new(&mut pb, channels, l, t, config.freq(), MixerInit::Random)?)
        } else {
            None
        };
        let mut resolved = None;
        let vision = if config.vision_enabled {
            let p = match (config.vision_period, period) {
                (0, Some(p)) => p,
                (0, None) => {
                    return Err(Error::Config(
                        "vision.period is 0 and no detected period was supplied".into(),
                    ))
                }
                (p, _) => p,
            };
            resolved = Some(p);
            let mut rng = stream_rng(seed, 3);
            let mut pb = ParamBuilder::new(&mut params, &mut rng);
            Some(VisionBranch::new(&mut pb, channels, l, t, p, config.vision())?)
        } else {
            None
        };
        let k = config.enabled().len();
        let gate = if config.gating && k > 1 {
            let mut rng = stream_rng(seed, 4);
            let mut pb = ParamBuilder::new(&mut params, &mut rng);
            Some(GateNetwork::new(&mut pb, k, channels, config.gate_hidden)?)
        } else {
            None
        };
        let mut config = config.clone();
        if let Some(p) = resolved {
            config.vision_period = p;
        }
        Ok(Self {
            config,
            channels,
            period: resolved,
            revin,
            time,
            freq,
            vision,
            gate,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records the forward pass of `x: [B, L, C]` on `g`.
    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<ForwardPass> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.config.lookback || shape[2] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: shape.to_vec(),
                rhs: vec![self.config.lookback, self.channels],
            });
        }
        let store = &self.params;
        let (xn, stats) = self.revin.normalize(g, store, x)?;
        let mut branches = Vec::with_capacity(3);
        if let Some(tb) = &self.time {
            branches.push((Modality::Time, tb.forward(g, store, xn)?));
        }
        if let Some(fb) = &self.freq {
            branches.push((Modality::Freq, fb.forward(g, store, xn)?));
        }
        if let Some(vb) = &self.vision {
            branches.push((Modality::Vision, vb.forward(g, store, xn)?));
        }
        let outs: Vec<Var> = branches.iter().map(|(_, v)| *v).collect();
        let weights = match &self.gate {
            Some(gate) => gate.weights(g, store, &outs)?,
            None => equal_weights(g, &outs)?,
        };
        let fused = fuse(g, &outs, &weights)?;
        let output = self.revin.denormalize(g, store, fused, &stats)?;
        let gates = branches.iter().map(|(m, _)| *m).zip(weights).collect();
        Ok(ForwardPass {
            output,
            fused,
            branches,
            gates,
            stats,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, x)?;
        Ok(Prediction {
            output: g.value(pass.output).clone(),
            gates: pass
                .gates
                .iter()
                .map(|(m, v)| (*m, g.value(*v).clone()))
                .collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.params, path)
    }

    /// Rebuilds the architecture from `config` and loads weights from `path`.
    pub fn load(config: &Config, channels: usize, path: impl AsRef<Path>) -> Result<Self> {
        let loaded = load_checkpoint(path)?;
        let mut model = Self::new(config, channels, None)?;
        model.params.copy_values_from(&loaded)?;
        Ok(model)
    }
}

//! Softmax gate combining per-branch forecasts.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Linear, LinearInit, ParamBuilder};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Time,
    Freq,
    Vision,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Time, Modality::Freq, Modality::Vision];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Time => "time",
            Modality::Freq => "freq",
            Modality::Vision => "vision",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Modality::Time),
            "freq" => Ok(Modality::Freq),
            "vision" => Ok(Modality::Vision),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Two-layer MLP over the concatenated branch outputs producing per-step,
/// per-channel softmax weights over the branches.
#[derive(Clone, Copy, Debug)]
pub struct GateNetwork {
    pub up: Linear,
    pub down: Linear,
    pub branches: usize,
    pub channels: usize,
}

impl GateNetwork {
    /// The output layer starts at zero, so initial weights are uniform.
    pub fn new(pb: &mut ParamBuilder<'_>, branches: usize, channels: usize, hidden: usize) -> Result<Self> {
        if branches == 0 || hidden == 0 {
            return Err(Error::Config("gate needs at least one branch and a positive width".into()));
        }
        let mut pb = pb.scoped("gate");
        let width = branches * channels;
        Ok(Self {
            up: Linear::new(&mut pb, "up", width, hidden, true, LinearInit::Default)?,
            down: Linear::new(&mut pb, "down", hidden, width, true, LinearInit::Zeros)?,
            branches,
            channels,
        })
    }

    /// Gate weights `[B, T, C]` per branch, summing to one elementwise.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, outputs: &[Var]) -> Result<Vec<Var>> {
        check_outputs(g, outputs, self.branches)?;
        let shape = g.shape(outputs[0]).to_vec();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let joined = g.concat(outputs, 2)?;
        let h = self.up.forward(g, store, joined)?;
        let h = g.gelu(h)?;
        let logits = self.down.forward(g, store, h)?;
        // logits are laid out [C, k] per step so softmax runs over branches
        let logits = g.reshape(logits, &[b, t, c, self.branches])?;
        let w = g.softmax(logits)?;
        (0..self.branches)
            .map(|j| {
                let wj = g.slice(w, 3, j, 1)?;
                g.reshape(wj, &[b, t, c])
            })
            .collect()
    }
}

fn check_outputs(g: &Graph, outputs: &[Var], k: usize) -> Result<()> {
    if outputs.len() != k || k == 0 {
        return Err(Error::Contract(format!(
            "expected {k} branch outputs, got {}",
            outputs.len()
        )));
    }
    let first = g.shape(outputs[0]);
    if first.len() != 3 {
        return Err(Error::InvalidShape {
            shape: first.to_vec(),
            reason: "branch outputs must be [batch, horizon, channels]".into(),
        });
    }
    for &o in &outputs[1..] {
        if g.shape(o) != first {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: first.to_vec(),
                rhs: g.shape(o).to_vec(),
            });
        }
    }
    Ok(())
}

/// Fixed equal weights `1/k` for each of `k` branch outputs.
pub fn equal_weights(g: &mut Graph, outputs: &[Var]) -> Result<Vec<Var>> {
    check_outputs(g, outputs, outputs.len())?;
    let shape = g.shape(outputs[0]).to_vec();
    let k = outputs.len() as f64;
    Ok(outputs
        .iter()
        .map(|_| g.constant(Tensor::full(shape.clone(), 1.0 / k)))
        .collect())
}

/// `sum_j weights[j] * outputs[j]`.
pub fn fuse(g: &mut Graph, outputs: &[Var], weights: &[Var]) -> Result<Var> {
    check_outputs(g, outputs, weights.len())?;
    let mut acc: Option<Var> = None;
    for (&o, &w) in outputs.iter().zip(weights) {
        let term = g.mul(o, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one branch"))
}

/// Running mean of gate weights per modality over batches, time steps and
/// channels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateReport {
    sums: Vec<(Modality, f64)>,
    count: usize,
}

impl GateReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one batch of `[B, T, C]` weights.
    pub fn add(&mut self, gates: &[(Modality, Tensor)]) -> Result<()> {
        if self.sums.is_empty() {
            self.sums = gates.iter().map(|(m, _)| (*m, 0.0)).collect();
        }
        let same = self.sums.len() == gates.len()
            && self.sums.iter().zip(gates).all(|((a, _), (b, _))| a == b);
        if !same {
            return Err(Error::Contract("gate modalities changed between batches".into()));
        }
        let n = gates.first().map_or(0, |(_, t)| t.numel());
        for ((_, acc), (_, t)) in self.sums.iter_mut().zip(gates) {
            *acc += t.data().iter().sum::<f64>();
        }
        self.count += n;
        Ok(())
    }

    /// Mean weight per modality; the values sum to one.
    pub fn finish(&self) -> Result<Vec<(Modality, f64)>> {
        if self.count == 0 {
            return Err(Error::Contract("gate report has no batches".into()));
        }
        Ok(self
            .sums
            .iter()
            .map(|(m, s)| (*m, s / self.count as f64))
            .collect())
    }
}

//! Small layer building blocks shared by the branches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Registers parameters under a dotted name prefix, drawing initial values
/// from a seeded generator.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<'b>(&'b mut self, scope: &str) -> ParamBuilder<'b> {
        let prefix = if self.prefix.is_empty() {
            scope.to_string()
        } else {
            format!("{}.{scope}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound));
        self.tensor(name, t)
    }
}

/// Affine map over the last axis: `x @ w + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearInit {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weight and bias.
    Default,
    /// Weight drawn with the given bound, bias zero.
    Scaled(f64),
    Zeros,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: LinearInit,
    ) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = match init {
            LinearInit::Default => pb.uniform("weight", &[fan_in, fan_out], bound)?,
            LinearInit::Scaled(b) => pb.uniform("weight", &[fan_in, fan_out], b)?,
            LinearInit::Zeros => pb.constant("weight", &[fan_in, fan_out], 0.0)?,
        };
        let bias = if bias {
            Some(match init {
                LinearInit::Default => pb.uniform("bias", &[fan_out], bound)?,
                _ => pb.constant("bias", &[fan_out], 0.0)?,
            })
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// `Linear -> GELU -> Linear` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        dim: usize,
        hidden: usize,
        out_init: LinearInit,
    ) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let up = Linear::new(&mut pb, "up", dim, hidden, true, LinearInit::Default)?;
        let down = Linear::new(&mut pb, "down", hidden, dim, true, out_init)?;
        Ok(Self { up, down })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}

/// RMS normalization over the last axis with a learned gain.
#[derive(Clone, Copy, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let gain = pb.scoped(name).constant("gain", &[dim], 1.0)?;
        Ok(Self { gain, eps })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let rank = g.shape(x).len();
        let last = rank - 1;
        let sq = g.square(x)?;
        let ms = g.mean(sq, last)?;
        let ms = g.add_scalar(ms, self.eps)?;
        let rms = g.sqrt(ms)?;
        let inv = g.reciprocal(rms)?;
        // feature axis to the front so the per-row factor broadcasts
        let mut front: Vec<usize> = vec![last];
        front.extend(0..last);
        let xt = g.permute(x, &front)?;
        let scaled = g.mul(xt, inv)?;
        let mut back: Vec<usize> = (1..rank).collect();
        back.push(0);
        let y = g.permute(scaled, &back)?;
        let gain = g.param(store, self.gain);
        g.mul(y, gain)
    }
}

/// Combines `x: [lead..., rest...]` with `factor: [lead...]` elementwise,
/// broadcasting the factor over `rest`. The leading axes are moved to the
/// back so the trailing-dimension broadcast rule applies.
pub fn broadcast_leading(
    g: &mut Graph,
    x: Var,
    factor: Var,
    combine: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let fs = g.shape(factor).to_vec();
    let k = fs.len();
    if !xs.starts_with(&fs) {
        return Err(crate::Error::ShapeMismatch {
            op: "broadcast_leading",
            lhs: xs,
            rhs: fs,
        });
    }
    let rank = xs.len();
    let mut to_back: Vec<usize> = (k..rank).collect();
    to_back.extend(0..k);
    let moved = g.permute(x, &to_back)?;
    let combined = combine(g, moved, factor)?;
    let mut restore: Vec<usize> = ((rank - k)..rank).collect();
    restore.extend(0..(rank - k));
    g.permute(combined, &restore)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rms_norm_unit_rms() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let norm = RmsNorm::new(&mut ParamBuilder::new(&mut store, &mut rng), "n", 4, 0.0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.37).sin() + 0.2));
        let y = norm.forward(&mut g, &store, x).unwrap();
        for row in g.value(y).data().chunks(4) {
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((ms - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_leading_adds_per_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 3, 4]));
        let f = g.constant(Tensor::from_fn([2, 3], |i| i as f64));
        let y = broadcast_leading(&mut g, x, f, Graph::add).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[2, 3, 4]);
        assert_eq!(v.at(&[1, 2, 3]), 5.0);
        assert_eq!(v.at(&[0, 1, 0]), 1.0);
    }
}

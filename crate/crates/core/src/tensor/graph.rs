use std::collections::HashMap;

use super::{check_permutation, inverse_permutation, permute_data, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive vocabulary. Everything else is composed from these.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Permute,
    Reshape,
    Softmax,
    Silu,
    Gelu,
    Exp,
    Slice,
    Concat,
    ReduceMean,
    ReduceSum,
    Scan,
    Softplus,
    Reciprocal,
    Sqrt,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { lhs: Var, rhs: Var },
    Add { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    Permute { input: Var, axes: Vec<usize> },
    Reshape { input: Var },
    Softmax { input: Var },
    Silu { input: Var },
    Gelu { input: Var },
    Exp { input: Var },
    Slice { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    ReduceMean { input: Var, axis: usize },
    ReduceSum { input: Var, axis: usize },
    Scan { decay: Var, drive: Var, axis: usize, reverse: bool },
    Softplus { input: Var },
    Reciprocal { input: Var },
    Sqrt { input: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Silu { .. } => OpKind::Silu,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Exp { .. } => OpKind::Exp,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::ReduceMean { .. } => OpKind::ReduceMean,
            Op::ReduceSum { .. } => OpKind::ReduceSum,
            Op::Scan { .. } => OpKind::Scan,
            Op::Softplus { .. } => OpKind::Softplus,
            Op::Reciprocal { .. } => OpKind::Reciprocal,
            Op::Sqrt { .. } => OpKind::Sqrt,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so the arena order is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

// (outer, axis length, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Forward value of `root`. Values are computed eagerly as nodes are
    /// appended, so this only hands back the cached result.
    pub fn evaluate(&self, root: Var) -> &Tensor {
        self.value(root)
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf whose gradient is tracked according to the tensor's own flag.
    pub fn input(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push(Op::Leaf, value, rg)
    }

    /// Leaf holding a copy of a stored parameter. Repeated calls with the
    /// same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let mut value = store.get(id).clone();
        value.set_grad(None);
        let v = self.push(Op::Leaf, value, true);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    /// `lhs[..., k] @ rhs[k, n] -> [..., n]`
    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs).to_vec();
        if ls.is_empty() || rs.len() != 2 || ls[ls.len() - 1] != rs[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let (k, n) = (rs[0], rs[1]);
        let m = self.value(lhs).numel() / k;
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(lhs).data(),
            self.value(rhs).data(),
            &mut out,
            m,
            k,
            n,
        );
        let mut shape = ls;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[lhs, rhs]);
        Ok(self.push(Op::MatMul { lhs, rhs }, Tensor::new(shape, out)?, rg))
    }

    // Operand order for a trailing-dimension broadcast: (big, small).
    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.ends_with(sb) {
            Ok((a, b))
        } else if sb.ends_with(sa) {
            Ok((b, a))
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool, Var, Var)> {
        let (big, small) = self.broadcast_pair(name, a, b)?;
        let bv = self.value(big);
        let sv = self.value(small).data();
        let mut data = Vec::with_capacity(bv.numel());
        for chunk in bv.data().chunks_exact(sv.len()) {
            data.extend(chunk.iter().zip(sv).map(|(&x, &y)| f(x, y)));
        }
        let out = Tensor::new(bv.shape().to_vec(), data)?;
        Ok((out, self.rg(&[a, b]), big, small))
    }

    /// Elementwise sum with trailing-dimension broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg, big, small) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(
            Op::Add {
                lhs: big,
                rhs: small,
            },
            out,
            rg,
        ))
    }

    /// Elementwise product with trailing-dimension broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg, big, small) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(
            Op::Mul {
                lhs: big,
                rhs: small,
            },
            out,
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let s = self.scalar(factor);
        self.mul(a, s)
    }

    pub fn add_scalar(&mut self, a: Var, value: f64) -> Result<Var> {
        let s = self.scalar(value);
        self.add(a, s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(input);
        check_permutation(v.shape(), axes)?;
        let shape: Vec<usize> = axes.iter().map(|&a| v.shape()[a]).collect();
        let data = permute_data(v.data(), v.shape(), axes);
        let rg = self.rg(&[input]);
        Ok(self.push(
            Op::Permute {
                input,
                axes: axes.to_vec(),
            },
            Tensor::new(shape, data)?,
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, input: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(input).len();
        if a >= rank || b >= rank {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: self.shape(input).to_vec(),
                rhs: vec![a, b],
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(input, &axes)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[input]);
        Ok(self.push(Op::Reshape { input }, v, rg))
    }

    fn unary(
        &mut self,
        input: Var,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let v = self.value(input);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(op, out, rg))
    }

    pub fn silu(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Silu { input }, |x| x * sigmoid(x))
    }

    pub fn gelu(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Gelu { input }, |x| gelu_parts(x).0)
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Exp { input }, f64::exp)
    }

    pub fn softplus(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Softplus { input }, softplus)
    }

    pub fn reciprocal(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Reciprocal { input }, |x| 1.0 / x)
    }

    pub fn sqrt(&mut self, input: Var) -> Result<Var> {
        self.unary(input, Op::Sqrt { input }, f64::sqrt)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let shape = v.shape().to_vec();
        let width = *shape.last().ok_or_else(|| Error::InvalidShape {
            shape: shape.clone(),
            reason: "softmax needs rank >= 1".into(),
        })?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Op::Softmax { input }, Tensor::new(shape, data)?, rg))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(input);
        let shape = v.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[input]);
        Ok(self.push(
            Op::Slice { input, axis, start },
            Tensor::new(out_shape, data)?,
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            Tensor::new(shape, data)?,
            rg,
        ))
    }

    fn reduce(&mut self, input: Var, axis: usize, mean: bool) -> Result<Var> {
        let v = self.value(input);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: if mean { "reduce_mean" } else { "reduce_sum" },
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..alen {
                let src = &v.data()[(o * alen + t) * inner..(o * alen + t + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / alen as f64;
            data.iter_mut().for_each(|x| *x *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[input]);
        let op = if mean {
            Op::ReduceMean { input, axis }
        } else {
            Op::ReduceSum { input, axis }
        };
        Ok(self.push(op, Tensor::new(out_shape, data)?, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.reduce(input, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.reduce(input, axis, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        let flat = self.reshape(input, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        let flat = self.reshape(input, &[n])?;
        self.mean(flat, 0)
    }

    /// First-order linear recurrence along `axis`:
    /// `h[t] = decay[t] * h[t-1] + drive[t]` with `h[-1] = 0`.
    /// With `reverse` the recurrence runs from the last index to the first.
    pub fn scan(&mut self, decay: Var, drive: Var, axis: usize, reverse: bool) -> Result<Var> {
        let shape = self.shape(drive).to_vec();
        if self.shape(decay) != shape.as_slice() || axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "scan",
                lhs: self.shape(decay).to_vec(),
                rhs: shape,
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let a = self.value(decay).data();
        let b = self.value(drive).data();
        let mut h = vec![0.0; a.len()];
        for o in 0..outer {
            let block = o * len * inner;
            for step in 0..len {
                let t = if reverse { len - 1 - step } else { step };
                let cur = block + t * inner;
                if step == 0 {
                    h[cur..cur + inner].copy_from_slice(&b[cur..cur + inner]);
                } else {
                    let prev = if reverse { cur + inner } else { cur - inner };
                    for i in 0..inner {
                        h[cur + i] = a[cur + i] * h[prev + i] + b[cur + i];
                    }
                }
                if h[cur..cur + inner].iter().any(|x| !x.is_finite()) {
                    return Err(Error::NumericalInstability { op: "scan", index: t });
                }
            }
        }
        let rg = self.rg(&[decay, drive]);
        Ok(self.push(
            Op::Scan {
                decay,
                drive,
                axis,
                reverse,
            },
            Tensor::new(shape, h)?,
            rg,
        ))
    }

    /// Reverse-mode sweep from a single-element `root`. Every node is
    /// visited once, in reverse arena order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward then fold leaf gradients into the owning parameters.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(root)?;
        self.accumulate_param_grads(&grads, store);
        Ok(grads)
    }

    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&id, &var) in &self.param_vars {
            let numel = self.value(var).numel();
            let target = store.get_mut(id).grad_mut();
            match grads.wrt(var) {
                Some(g) => target.iter_mut().zip(g).for_each(|(t, v)| *t += v),
                None => debug_assert_eq!(target.len(), numel),
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { lhs, rhs } => {
                let a = self.value(*lhs);
                let b = self.value(*rhs);
                let (k, n) = (b.shape()[0], b.shape()[1]);
                let m = a.numel() / k;
                if self.requires_grad(*lhs) {
                    // dA = G @ B^T
                    let bt = permute_data(b.data(), b.shape(), &[1, 0]);
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut da, m, n, k);
                    accumulate(grads, *lhs, da);
                }
                if self.requires_grad(*rhs) {
                    // dB = A^T @ G
                    let at = permute_data(a.data(), &[m, k], &[1, 0]);
                    let mut db = vec![0.0; k * n];
                    matmul_into(&at, g, &mut db, k, m, n);
                    accumulate(grads, *rhs, db);
                }
            }
            Op::Add { lhs, rhs } => {
                if self.requires_grad(*lhs) {
                    accumulate(grads, *lhs, g.to_vec());
                }
                if self.requires_grad(*rhs) {
                    let n = self.value(*rhs).numel();
                    let mut d = vec![0.0; n];
                    for chunk in g.chunks_exact(n) {
                        d.iter_mut().zip(chunk).for_each(|(dv, gv)| *dv += gv);
                    }
                    accumulate(grads, *rhs, d);
                }
            }
            Op::Mul { lhs, rhs } => {
                let a = self.value(*lhs).data();
                let b = self.value(*rhs).data();
                let n = b.len();
                if self.requires_grad(*lhs) {
                    let mut d = Vec::with_capacity(g.len());
                    for chunk in g.chunks_exact(n) {
                        d.extend(chunk.iter().zip(b).map(|(gv, bv)| gv * bv));
                    }
                    accumulate(grads, *lhs, d);
                }
                if self.requires_grad(*rhs) {
                    let mut d = vec![0.0; n];
                    for (gc, ac) in g.chunks_exact(n).zip(a.chunks_exact(n)) {
                        for ((dv, gv), av) in d.iter_mut().zip(gc).zip(ac) {
                            *dv += gv * av;
                        }
                    }
                    accumulate(grads, *rhs, d);
                }
            }
            Op::Permute { input, axes } => {
                let inv = inverse_permutation(axes);
                accumulate(grads, *input, permute_data(g, out.shape(), &inv));
            }
            Op::Reshape { input } => accumulate(grads, *input, g.to_vec()),
            Op::Softmax { input } => {
                let width = *out.shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(width)
                    .zip(out.data().chunks(width))
                    .zip(g.chunks(width))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dv, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = y * (gv - dot);
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::Silu { input } => {
                let x = self.value(*input).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *input, d);
            }
            Op::Gelu { input } => {
                let x = self.value(*input).data();
                let d = x.iter().zip(g).map(|(&x, gv)| gv * gelu_parts(x).1).collect();
                accumulate(grads, *input, d);
            }
            Op::Exp { input } => {
                let d = out.data().iter().zip(g).map(|(y, gv)| y * gv).collect();
                accumulate(grads, *input, d);
            }
            Op::Softplus { input } => {
                let x = self.value(*input).data();
                let d = x.iter().zip(g).map(|(&x, gv)| gv * sigmoid(x)).collect();
                accumulate(grads, *input, d);
            }
            Op::Reciprocal { input } => {
                let d = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(y, gv)| -gv * y * y)
                    .collect();
                accumulate(grads, *input, d);
            }
            Op::Sqrt { input } => {
                let d = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(y, gv)| 0.5 * gv / y)
                    .collect();
                accumulate(grads, *input, d);
            }
            Op::Slice { input, axis, start } => {
                let ishape = self.shape(*input);
                let (outer, alen, inner) = split_axis(ishape, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; outer * alen * inner];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, *input, d);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            d.extend_from_slice(&g[src..src + len * inner]);
                        }
                        accumulate(grads, v, d);
                    }
                    offset += len;
                }
            }
            Op::ReduceMean { input, axis } | Op::ReduceSum { input, axis } => {
                let ishape = self.shape(*input);
                let (outer, alen, inner) = split_axis(ishape, *axis);
                let factor = if matches!(node.op, Op::ReduceMean { .. }) {
                    1.0 / alen as f64
                } else {
                    1.0
                };
                let mut d = vec![0.0; outer * alen * inner];
                for o in 0..outer {
                    let gs = &g[o * inner..(o + 1) * inner];
                    for t in 0..alen {
                        let dst = &mut d[(o * alen + t) * inner..(o * alen + t + 1) * inner];
                        for (dv, gv) in dst.iter_mut().zip(gs) {
                            *dv = gv * factor;
                        }
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::Scan {
                decay,
                drive,
                axis,
                reverse,
            } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let a = self.value(*decay).data();
                let h = out.data();
                // gh[t] = g[t] + a[t+1] * gh[t+1], walking against the scan direction
                let mut gh = vec![0.0; g.len()];
                for o in 0..outer {
                    let block = o * len * inner;
                    for step in 0..len {
                        let t = if *reverse { step } else { len - 1 - step };
                        let cur = block + t * inner;
                        if step == 0 {
                            gh[cur..cur + inner].copy_from_slice(&g[cur..cur + inner]);
                        } else {
                            let next = if *reverse { cur - inner } else { cur + inner };
                            for i in 0..inner {
                                gh[cur + i] = g[cur + i] + a[next + i] * gh[next + i];
                            }
                        }
                    }
                }
                if self.requires_grad(*decay) {
                    let mut da = vec![0.0; g.len()];
                    for o in 0..outer {
                        let block = o * len * inner;
                        for t in 0..len {
                            let first = if *reverse { t == len - 1 } else { t == 0 };
                            if first {
                                continue;
                            }
                            let cur = block + t * inner;
                            let prev = if *reverse { cur + inner } else { cur - inner };
                            for i in 0..inner {
                                da[cur + i] = gh[cur + i] * h[prev + i];
                            }
                        }
                    }
                    accumulate(grads, *decay, da);
                }
                if self.requires_grad(*drive) {
                    accumulate(grads, *drive, gh);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, d: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_identity_padded() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::new([3, 2], vec![1., 0., 0., 1., 0., 0.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
        assert_eq!(g.value(c).data(), &[1., 2., 4., 5.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 2]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([3]));
        let s = g.softmax(x).unwrap();
        for &v in g.value(s).data() {
            assert_eq!(v, 1.0 / 3.0);
        }
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new([4], vec![0.3, -1.2, 2.0, 0.1]).unwrap().with_requires_grad(true));
        let s = g.softmax(x).unwrap();
        let total = g.sum_all(s).unwrap();
        let grads = g.backward(total).unwrap();
        for &v in grads.wrt(x).unwrap() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_must_be_trailing() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2]));
        assert!(g.add(a, b).is_err());
        let c = g.constant(Tensor::zeros([3]));
        let ac = g.add(a, c).unwrap();
        assert_eq!(g.shape(ac), &[2, 3]);
        let s = g.scalar(2.0);
        let sa = g.mul(s, a).unwrap();
        assert_eq!(g.shape(sa), &[2, 3]);
    }

    #[test]
    fn scan_matches_loop() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new([1, 3, 1], vec![0.0, 0.5, 0.5]).unwrap());
        let b = g.constant(Tensor::new([1, 3, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let fwd = g.scan(a, b, 1, false).unwrap();
        assert_eq!(g.value(fwd).data(), &[1.0, 1.5, 1.75]);
        let bwd = g.scan(a, b, 1, true).unwrap();
        // from the end: h2 = 1, h1 = 0.5*1 + 1, h0 = 0*1.5 + 1
        assert_eq!(g.value(bwd).data(), &[1.0, 1.5, 1.0]);
    }

    #[test]
    fn scan_reports_instability_index() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full([1, 4], 1e308));
        let b = g.constant(Tensor::full([1, 4], 1e308));
        match g.scan(a, b, 1, false) {
            Err(Error::NumericalInstability { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_is_repeatable() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn([3, 4], |i| (i as f64 * 0.7).sin()).with_requires_grad(true));
        let w = g.input(Tensor::from_fn([4, 2], |i| (i as f64 * 1.3).cos()).with_requires_grad(true));
        let y = g.matmul(x, w).unwrap();
        let y = g.gelu(y).unwrap();
        let l = g.sum_all(y).unwrap();
        let g1 = g.backward(l).unwrap();
        let g2 = g.backward(l).unwrap();
        assert_eq!(g1.wrt(x), g2.wrt(x));
        assert_eq!(g1.wrt(w), g2.wrt(w));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu_parts(x + h).0 - gelu_parts(x - h).0) / (2.0 * h);
            assert_relative_eq!(gelu_parts(x).1, fd, epsilon = 1e-8);
        }
    }
}

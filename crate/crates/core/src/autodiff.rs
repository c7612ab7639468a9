//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the record in reverse and accumulates
//! `d(root)/d(param)` into the gradients held by a [`ParamStore`].

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{MatmulPlan, Tensor};
use std::str::FromStr;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + bias` where bias matches the trailing axes of x.
    AddTrailing(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var, MatmulPlan),
    Act(Var, Activation),
    Abs(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Index(Var, usize, usize),
    Stack(Vec<Var>, usize),
    MeanAxis(Var, usize),
    SelectRows {
        dense: Var,
        fallback: Var,
        keep: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Splits a shape around `axis` into `(outer, extent, inner)` block sizes.
fn blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push_rearranged(value, op))
    }

    /// For ops that only move or select finite values.
    fn push_rearranged(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf whose gradient can be read back through [`Graph::gradients`].
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, "input")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant, "constant")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        Ok(self.push_rearranged(store.value(id).clone(), Op::Param(id)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Adds `bias` to every trailing block of `x`; `bias.shape()` must equal
    /// the last `bias.rank()` extents of `x`.
    pub fn add_trailing(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::dim("add_trailing", xs, bs));
        }
        let block = self.value(bias).len();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(block) {
            for (o, bv) in chunk.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(out, Op::AddTrailing(x, bias), "add_trailing")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x).scale(factor);
        self.push(v, Op::Scale(x, factor), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddScalar(x), "add_scalar")
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// See [`Tensor::matmul`] for the supported layouts.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; plan.batch * plan.m * plan.n];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::from_parts(plan.out_shape.clone(), out);
        self.push(t, Op::Matmul(a, b, plan), "matmul")
    }

    pub fn activation(&mut self, act: Activation, x: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match act {
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
            Activation::Relu => |v| v.max(0.0),
        };
        let v = self.value(x).map(f);
        self.push(v, Op::Act(x, act), "activation")
    }

    /// Applies a scalar function named by `tag` (`sigmoid`, `tanh`, `relu`).
    pub fn elementwise(&mut self, tag: &str, x: Var) -> Result<Var> {
        let act = tag.parse()?;
        self.activation(act, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::abs);
        Ok(self.push_rearranged(v, Op::Abs(x)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = softmax_last(self.value(x));
        self.push(v, Op::Softmax(x), "softmax")
    }

    /// Normalizes over the last axis, then applies per-channel gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().expect("rank >= 1");
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(Error::dim("layer_norm", &xs, self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / c;
        let mut normed = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let nh = (row[j] - mean) * is;
                normed[r * c + j] = nh;
                out[r * c + j] = g[j] * nh + b[j];
            }
        }
        let t = Tensor::from_parts(xs, out);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::from_parts(vec![1], vec![self.value(x).sum()]);
        self.push(t, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::from_parts(vec![1], vec![v.sum() / v.len() as f64]);
        self.push(t, Op::Mean(x), "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push_rearranged(t, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(axes)?;
        Ok(self.push_rearranged(t, Op::Permute(x, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = blocks(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push_rearranged(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis)))
    }

    /// Selects position `i` along `axis`, dropping that axis.
    pub fn index(&mut self, x: Var, axis: usize, i: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || i >= s[axis] || s.len() < 2 {
            return Err(Error::Contract(format!("index {i} on axis {axis} of {s:?}")));
        }
        let (outer, ext, inner) = blocks(&s, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * ext + i) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push_rearranged(Tensor::from_parts(shape, out), Op::Index(x, axis, i)))
    }

    /// Stacks equally shaped values along a new `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Contract("stack of nothing".into()))?)
            .to_vec();
        if axis > first.len() {
            return Err(Error::Contract(format!("stack axis {axis} out of range")));
        }
        for &v in xs {
            if self.shape(v) != first.as_slice() {
                return Err(Error::dim("stack", &first, self.shape(v)));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * xs.len() * inner);
        for o in 0..outer {
            for &v in xs {
                out.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first;
        shape.insert(axis, xs.len());
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_rearranged(t, Op::Stack(xs.to_vec(), axis)))
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(format!("mean axis {axis} out of range")));
        }
        let (outer, ext, inner) = blocks(&s, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &data[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / ext as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s;
        shape[axis] = 1;
        self.push(Tensor::from_parts(shape, out), Op::MeanAxis(x, axis), "mean_axis")
    }

    /// Row-wise choice between two sources.
    ///
    /// `dense` has shape `[S, T, D]` and `fallback` `[S, 1, D]`; row `(s, t)`
    /// of the result is copied from `dense` when `keep[s * T + t]`, otherwise
    /// from `fallback[s]`.
    pub fn select_rows(&mut self, dense: Var, fallback: Var, keep: Vec<bool>) -> Result<Var> {
        let ds = self.shape(dense).to_vec();
        let fs = self.shape(fallback);
        if ds.len() != 3 || fs != [ds[0], 1, ds[2]] || keep.len() != ds[0] * ds[1] {
            return Err(Error::dim("select_rows", &ds, fs));
        }
        let (t, d) = (ds[1], ds[2]);
        let mut out = self.value(dense).clone();
        let fb = self.value(fallback).data();
        for (row, &k) in keep.iter().enumerate() {
            if !k {
                let s = row / t;
                out.data_mut()[row * d..(row + 1) * d].copy_from_slice(&fb[s * d..(s + 1) * d]);
            }
        }
        self.push(
            out,
            Op::SelectRows {
                dense,
                fallback,
                keep,
            },
            "select_rows",
        )
    }

    /// Gradients of the scalar `root` with respect to every recorded value.
    pub fn gradients(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, found shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_parts(vec![1], vec![1.0]));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d(root)/d(param)` into every participating parameter.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(root)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Input | Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.mul(bv).expect("shapes checked in forward"));
                acc(*b, g.mul(av).expect("shapes checked in forward"));
            }
            Op::AddTrailing(x, bias) => {
                acc(*x, g.clone());
                let bshape = self.shape(*bias).to_vec();
                let block = bshape.iter().product::<usize>();
                let mut db = vec![0.0; block];
                for chunk in g.data().chunks(block) {
                    for (d, v) in db.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(*bias, Tensor::from_parts(bshape, db));
            }
            Op::Scale(x, f) => acc(*x, g.scale(*f)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Matmul(a, b, plan) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                plan.backward(av.data(), bv.data(), g.data(), &mut da, &mut db);
                acc(*a, Tensor::from_parts(av.shape().to_vec(), da));
                acc(*b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::Act(x, act) => {
                let y = &node.value;
                let local = match act {
                    Activation::Sigmoid => y.map(|s| s * (1.0 - s)),
                    Activation::Tanh => y.map(|t| 1.0 - t * t),
                    Activation::Relu => self.value(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                };
                acc(*x, g.mul(&local).expect("same shape"));
            }
            Op::Abs(x) => {
                let sign = self.value(*x).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(*x, g.mul(&sign).expect("same shape"));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = *node.value.shape().last().expect("rank >= 1");
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &g.data()[r * c..(r + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(*x, Tensor::from_parts(node.value.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let c = gv.len();
                let mut dx = vec![0.0; normed.len()];
                let mut dg = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dn = vec![0.0; c];
                for r in 0..inv_std.len() {
                    let gs = &g.data()[r * c..(r + 1) * c];
                    let ns = &normed[r * c..(r + 1) * c];
                    let mut sum_dn = 0.0;
                    let mut sum_dn_n = 0.0;
                    for j in 0..c {
                        dg[j] += gs[j] * ns[j];
                        dbias[j] += gs[j];
                        dn[j] = gs[j] * gv[j];
                        sum_dn += dn[j];
                        sum_dn_n += dn[j] * ns[j];
                    }
                    let k = inv_std[r] / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = k * (c as f64 * dn[j] - sum_dn - ns[j] * sum_dn_n);
                    }
                }
                acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), dx));
                acc(*gain, Tensor::from_parts(vec![c], dg));
                acc(*bias, Tensor::from_parts(vec![c], dbias));
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                let len = s.iter().product();
                acc(*x, Tensor::from_parts(s, vec![g.data()[0]; len]));
            }
            Op::Mean(x) => {
                let s = self.shape(*x).to_vec();
                let len: usize = s.iter().product();
                acc(*x, Tensor::from_parts(s, vec![g.data()[0] / len as f64; len]));
            }
            Op::Reshape(x) => {
                acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), g.data().to_vec()));
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                acc(*x, g.permute(&inverse).expect("valid inverse permutation"));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = blocks(g.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let s = self.shape(v).to_vec();
                    let w = s[*axis] * inner;
                    let mut part = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let start = o * total * inner + offset;
                        part.extend_from_slice(&g.data()[start..start + w]);
                    }
                    offset += w;
                    acc(v, Tensor::from_parts(s, part));
                }
            }
            Op::Index(x, axis, i) => {
                let s = self.shape(*x).to_vec();
                let (outer, ext, inner) = blocks(&s, *axis);
                let mut dx = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let start = (o * ext + i) * inner;
                    dx[start..start + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
                acc(*x, Tensor::from_parts(s, dx));
            }
            Op::Stack(xs, axis) => {
                let s = self.shape(xs[0]).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis..].iter().product();
                for (j, &v) in xs.iter().enumerate() {
                    let mut part = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        let start = (o * xs.len() + j) * inner;
                        part.extend_from_slice(&g.data()[start..start + inner]);
                    }
                    acc(v, Tensor::from_parts(s.clone(), part));
                }
            }
            Op::MeanAxis(x, axis) => {
                let s = self.shape(*x).to_vec();
                let (outer, ext, inner) = blocks(&s, *axis);
                let inv = 1.0 / ext as f64;
                let mut dx = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..ext {
                        dx.extend(src.iter().map(|v| v * inv));
                    }
                }
                acc(*x, Tensor::from_parts(s, dx));
            }
            Op::SelectRows {
                dense,
                fallback,
                keep,
            } => {
                let ds = self.shape(*dense).to_vec();
                let (t, d) = (ds[1], ds[2]);
                let mut dd = g.clone();
                let mut df = vec![0.0; ds[0] * d];
                for (row, &k) in keep.iter().enumerate() {
                    if !k {
                        let s = row / t;
                        let src = &mut dd.data_mut()[row * d..(row + 1) * d];
                        for (f, v) in df[s * d..(s + 1) * d].iter_mut().zip(src.iter_mut()) {
                            *f += *v;
                            *v = 0.0;
                        }
                    }
                }
                acc(*dense, dd);
                acc(*fallback, Tensor::from_parts(vec![ds[0], 1, d], df));
            }
        }
    }
}

/// Result of [`Graph::gradients`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the last axis with max-subtraction.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let c = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

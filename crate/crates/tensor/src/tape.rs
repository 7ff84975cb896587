//! Define-by-run reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its output and the
//! indices of its inputs. `backward` walks the nodes in reverse creation
//! order, which is a valid topological order because inputs always precede
//! their consumers.

use crate::error::{arg_err, shape_err, Result};
use crate::float::Float;
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary<E> {
    Neg,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    LogSigmoid,
    Scale(E),
    AddScalar(E),
    Powf(E),
}

#[derive(Debug)]
enum Op<E: Float> {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary<E>, usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow { a: usize, axis: usize, start: usize },
    IndexSelect { a: usize, axis: usize, indices: Vec<usize> },
    Sum(usize),
    SumAxis(usize, usize),
    Softmax { a: usize, axis: usize, log: bool },
    LayerNorm { x: usize, gamma: usize, beta: usize, stats: kernels::NormStats<E> },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, stats: kernels::NormStats<E> },
    Conv3d { x: usize, w: usize, bias: Option<usize>, geom: ConvGeom },
    Upsample { a: usize, hw: (usize, usize) },
}

struct Node<E: Float> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
pub struct Tape<E: Float> {
    nodes: Vec<Node<E>>,
}

impl<E: Float> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Float> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input treated as a constant by `backward`.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: E, y: E| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Max => x.max(y),
            Binary::Min => x.min(y),
        };
        let (shape, data) = if ta.shape() == tb.shape() {
            (ta.shape().to_vec(), ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
        } else {
            let shape = kernels::broadcast_shape(ta.shape(), tb.shape())?;
            let oa = kernels::broadcast_offsets(&shape, ta.shape());
            let ob = kernels::broadcast_offsets(&shape, tb.shape());
            let (da, db) = (ta.data(), tb.data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            (shape, data)
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary(kind, a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    fn unary(&mut self, kind: Unary<E>, a: Var) -> Var {
        let f = |x: E| match kind {
            Unary::Neg => -x,
            Unary::Relu => x.max(E::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::LogSigmoid => log_sigmoid(x),
            Unary::Scale(c) => x * c,
            Unary::AddScalar(c) => x + c,
            Unary::Powf(p) => x.powf(p),
        };
        let out = self.value(a).map(f);
        let rg = self.rg(a.0);
        self.push(out, Op::Unary(kind, a.0), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    /// `ln(sigmoid(x))`, evaluated without forming `sigmoid(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::LogSigmoid, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(E::of(c)), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(E::of(c)), a)
    }

    /// `x^p` for a constant exponent; `x` must be positive where `p < 1`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(Unary::Powf(E::of(p)), a)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product of rank-2 or batched rank-3 operands, with optional
    /// transposition of either side. A rank-2 operand is shared across the
    /// batch of a rank-3 one.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let g = MatMulGeom::new(self.shape(a), self.shape(b), ta, tb)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![E::zero(); g.batch * g.m * g.n];
        for bi in 0..g.batch {
            kernels::gemm(
                g.m,
                g.k,
                g.n,
                E::one(),
                av.data(),
                g.a_view(bi, ta),
                bv.data(),
                g.b_view(bi, tb),
                E::zero(),
                &mut out,
                g.c_view(bi, false),
            );
        }
        let shape = if g.batched { vec![g.batch, g.m, g.n] } else { vec![g.m, g.n] };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a: a.0, b: b.0, ta, tb }, rg))
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(axes)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Permute(a.0, axes.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let rank = self.value(a).rank();
        if i >= rank || j >= rank {
            return arg_err(format!("transpose axes ({i}, {j}) for rank {rank}"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(i, j);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return arg_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return arg_err(format!("concat axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return shape_err(format!("concat of {:?} with {:?} along {axis}", base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.iter().map(|p| p.0).collect(), axis), rg))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return arg_err(format!("narrow {start}+{len} on axis {axis} of {:?}", shape));
        }
        let (outer, ext, inner) = kernels::split_axis(&shape, axis);
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Narrow { a: a.0, axis, start }, rg))
    }

    /// Gathers slices along `axis`; indices may repeat.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return arg_err(format!("index_select axis {axis} for rank {}", shape.len()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return arg_err(format!("index {bad} out of range for axis extent {}", shape[axis]));
        }
        let (outer, ext, inner) = kernels::split_axis(&shape, axis);
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * ext + i) * inner;
                out.extend_from_slice(&data[base..base + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = indices.len();
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::IndexSelect { a: a.0, axis, indices: indices.to_vec() },
            rg,
        ))
    }

    // ---- reductions ----------------------------------------------------

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<E>();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return arg_err(format!("sum axis {axis} for rank {}", shape.len()));
        }
        let (outer, ext, inner) = kernels::split_axis(&shape, axis);
        let data = self.value(a).data();
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &data[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::SumAxis(a.0, axis), rg))
    }

    // ---- normalization / activation -----------------------------------

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return arg_err(format!("softmax axis {axis} for rank {}", t.rank()));
        }
        let data = if !log && axis + 1 == t.rank() {
            kernels::softmax_rows(t.data(), t.shape()[axis])
        } else {
            kernels::softmax(t.data(), t.shape(), axis, log)
        };
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a.0);
        Ok(self.push(out, Op::Softmax { a: a.0, axis, log }, rg))
    }

    /// Normalizes over the last axis with per-feature affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| crate::TensorError::Argument("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!("layer_norm affine must be [{d}]"));
        }
        let stats = kernels::group_stats(t.data(), d, E::of(eps));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(t.len());
        for (row, xs) in t.data().chunks_exact(d).enumerate() {
            let (m, r) = (stats.mean[row], stats.rstd[row]);
            out.extend(xs.iter().enumerate().map(|(i, &v)| (v - m) * r * g[i] + b[i]));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, stats }, rg))
    }

    /// Group normalization of `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return arg_err("group_norm expects [B, C, ...]");
        }
        let c = t.shape()[1];
        if groups == 0 || !c.is_multiple_of(groups) {
            return arg_err(format!("{c} channels not divisible into {groups} groups"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("group_norm affine must be [{c}]"));
        }
        let spatial: usize = t.shape()[2..].iter().product();
        let group_len = c / groups * spatial;
        let stats = kernels::group_stats(t.data(), group_len, E::of(eps));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<E> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let grp = i / group_len;
                let ch = (i / spatial) % c;
                (v - stats.mean[grp]) * stats.rstd[grp] * g[ch] + b[ch]
            })
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(out, Op::GroupNorm { x: x.0, gamma: gamma.0, beta: beta.0, groups, stats }, rg))
    }

    // ---- spatial -------------------------------------------------------

    /// 3-D convolution of `[B, Cin, T, H, W]` with `[Cout, Cin, kt, kh, kw]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return shape_err(format!("conv bias must be [{}]", geom.cout));
            }
        }
        let out = kernels::conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x.0) || self.rg(w.0) || bias.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            Tensor::from_parts(geom.output_shape(), out),
            Op::Conv3d { x: x.0, w: w.0, bias: bias.map(|b| b.0), geom },
            rg,
        ))
    }

    /// 2-D convolution of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]`,
    /// expressed as a depth-1 [`Tape::conv3d`].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return arg_err(format!("conv2d expects rank-4 input and kernel, got {:?} and {:?}", xs, ws));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = self.conv3d(x5, w5, bias, [1, stride[0], stride[1]], [0, pad[0], pad[1]])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])
    }

    /// Bilinear resize of the trailing two axes (half-pixel centers).
    pub fn upsample_bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || oh == 0 || ow == 0 {
            return arg_err(format!("cannot resize {:?} to {oh}x{ow}", shape));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let out = kernels::upsample_bilinear(self.value(a).data(), h, w, oh, ow);
        let mut oshape = shape;
        let r = oshape.len();
        oshape[r - 2] = oh;
        oshape[r - 1] = ow;
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Upsample { a: a.0, hw: (h, w) }, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.value(loss).len() != 1 {
            return arg_err(format!("backward needs a scalar, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backward_node(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, d: Vec<E>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(d) {
                        *e += v;
                    }
                }
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let same = ta.shape() == tb.shape();
                let (oa, ob) = if same {
                    (None, None)
                } else {
                    (
                        Some(kernels::broadcast_offsets(out.shape(), ta.shape())),
                        Some(kernels::broadcast_offsets(out.shape(), tb.shape())),
                    )
                };
                let av = |k: usize| ta.data()[oa.as_ref().map_or(k, |o| o[k])];
                let bv = |k: usize| tb.data()[ob.as_ref().map_or(k, |o| o[k])];
                let (ga, gb): (Vec<E>, Vec<E>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                    Binary::Mul => (
                        g.iter().enumerate().map(|(k, &v)| v * bv(k)).collect(),
                        g.iter().enumerate().map(|(k, &v)| v * av(k)).collect(),
                    ),
                    Binary::Div => (
                        g.iter().enumerate().map(|(k, &v)| v / bv(k)).collect(),
                        g.iter()
                            .enumerate()
                            .map(|(k, &v)| {
                                let y = bv(k);
                                -v * av(k) / (y * y)
                            })
                            .collect(),
                    ),
                    Binary::Max | Binary::Min => {
                        // ties route to the left operand
                        let left = |k: usize| {
                            if *kind == Binary::Max {
                                av(k) >= bv(k)
                            } else {
                                av(k) <= bv(k)
                            }
                        };
                        (
                            g.iter().enumerate().map(|(k, &v)| if left(k) { v } else { E::zero() }).collect(),
                            g.iter().enumerate().map(|(k, &v)| if left(k) { E::zero() } else { v }).collect(),
                        )
                    }
                };
                acc(*a, kernels::reduce_broadcast(&ga, out.shape(), ta.shape()));
                acc(*b, kernels::reduce_broadcast(&gb, out.shape(), tb.shape()));
            }
            Op::Unary(kind, a) => {
                let x = val(*a).data();
                let y = out.data();
                let d: Vec<E> = g
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| match *kind {
                        Unary::Neg => -v,
                        Unary::Relu => {
                            if x[k] > E::zero() {
                                v
                            } else {
                                E::zero()
                            }
                        }
                        Unary::Sigmoid => v * y[k] * (E::one() - y[k]),
                        Unary::Exp => v * y[k],
                        Unary::Log => v / x[k],
                        Unary::Abs => v * x[k].signum() * if x[k] == E::zero() { E::zero() } else { E::one() },
                        Unary::LogSigmoid => v * sigmoid(-x[k]),
                        Unary::Scale(c) => v * c,
                        Unary::AddScalar(_) => v,
                        Unary::Powf(p) => v * p * x[k].powf(p - E::one()),
                    })
                    .collect();
                acc(*a, d);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let geom = MatMulGeom::new(av.shape(), bv.shape(), *ta, *tb).expect("validated in forward");
                if self.nodes[*a].requires_grad {
                    let mut da = vec![E::zero(); av.len()];
                    for bi in 0..geom.batch {
                        let dst = geom.a_view(bi, false);
                        // Each batch writes its own block unless A is shared.
                        let beta = if geom.a_batched || bi == 0 { E::zero() } else { E::one() };
                        if !*ta {
                            // dA = dC · op(B)^T
                            kernels::gemm(
                                geom.m, geom.n, geom.k, E::one(),
                                g, geom.c_view(bi, false),
                                bv.data(), geom.b_view(bi, !*tb),
                                beta, &mut da, dst,
                            );
                        } else {
                            // stored A is k×m: dA = op(B) · dC^T
                            kernels::gemm(
                                geom.k, geom.n, geom.m, E::one(),
                                bv.data(), geom.b_view(bi, *tb),
                                g, geom.c_view(bi, true),
                                beta, &mut da, dst,
                            );
                        }
                    }
                    acc(*a, da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![E::zero(); bv.len()];
                    for bi in 0..geom.batch {
                        let dst = geom.b_view(bi, false);
                        let beta = if geom.b_batched || bi == 0 { E::zero() } else { E::one() };
                        if !*tb {
                            // dB = op(A)^T · dC
                            kernels::gemm(
                                geom.k, geom.m, geom.n, E::one(),
                                av.data(), geom.a_view(bi, !*ta),
                                g, geom.c_view(bi, false),
                                beta, &mut db, dst,
                            );
                        } else {
                            // stored B is n×k: dB = dC^T · op(A)
                            kernels::gemm(
                                geom.n, geom.m, geom.k, E::one(),
                                g, geom.c_view(bi, true),
                                av.data(), geom.a_view(bi, *ta),
                                beta, &mut db, dst,
                            );
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                acc(*a, kernels::permute(g, out.shape(), &inv).expect("inverse permutation"));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = val(p).shape()[*axis];
                    if self.nodes[p].requires_grad {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        acc(p, d);
                    }
                    offset += ext;
                }
            }
            Op::Narrow { a, axis, start } => {
                let src = val(*a).shape();
                let (outer, ext, inner) = kernels::split_axis(src, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![E::zero(); numel(src)];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*a, d);
            }
            Op::IndexSelect { a, axis, indices } => {
                let src = val(*a).shape();
                let (outer, ext, inner) = kernels::split_axis(src, *axis);
                let mut d = vec![E::zero(); numel(src)];
                for o in 0..outer {
                    for (k, &i) in indices.iter().enumerate() {
                        let s = (o * indices.len() + k) * inner;
                        let t = (o * ext + i) * inner;
                        for (dv, &gv) in d[t..t + inner].iter_mut().zip(&g[s..s + inner]) {
                            *dv += gv;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::SumAxis(a, axis) => {
                let src = val(*a).shape();
                let (outer, ext, inner) = kernels::split_axis(src, *axis);
                let mut d = Vec::with_capacity(numel(src));
                for o in 0..outer {
                    for _ in 0..ext {
                        d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*a, d);
            }
            Op::Softmax { a, axis, log } => {
                acc(*a, kernels::softmax_backward(out.data(), g, out.shape(), *axis, *log));
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = val(*x).data();
                let gm = val(*gamma).data();
                let d = gm.len();
                let mut dgamma = vec![E::zero(); d];
                let mut dbeta = vec![E::zero(); d];
                let mut dxhat = Vec::with_capacity(xv.len());
                for (row, (xs, gs)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                    let (m, r) = (stats.mean[row], stats.rstd[row]);
                    for c in 0..d {
                        dgamma[c] += gs[c] * (xs[c] - m) * r;
                        dbeta[c] += gs[c];
                        dxhat.push(gs[c] * gm[c]);
                    }
                }
                if self.nodes[*x].requires_grad {
                    acc(*x, kernels::normalize_backward(xv, &dxhat, d, stats));
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xt = val(*x);
                let xv = xt.data();
                let gm = val(*gamma).data();
                let c = xt.shape()[1];
                let spatial: usize = xt.shape()[2..].iter().product();
                let group_len = c / groups * spatial;
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                let mut dxhat = Vec::with_capacity(xv.len());
                for (k, (&xk, &gk)) in xv.iter().zip(g).enumerate() {
                    let grp = k / group_len;
                    let ch = (k / spatial) % c;
                    dgamma[ch] += gk * (xk - stats.mean[grp]) * stats.rstd[grp];
                    dbeta[ch] += gk;
                    dxhat.push(gk * gm[ch]);
                }
                if self.nodes[*x].requires_grad {
                    acc(*x, kernels::normalize_backward(xv, &dxhat, group_len, stats));
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Conv3d { x, w, bias, geom } => {
                let r = kernels::conv3d_backward(
                    geom,
                    val(*x).data(),
                    val(*w).data(),
                    g,
                    self.nodes[*x].requires_grad,
                    self.nodes[*w].requires_grad,
                    bias.is_some_and(|b| self.nodes[b].requires_grad),
                );
                if let Some(d) = r.input {
                    acc(*x, d);
                }
                if let Some(d) = r.kernel {
                    acc(*w, d);
                }
                if let (Some(b), Some(d)) = (bias, r.bias) {
                    acc(*b, d);
                }
            }
            Op::Upsample { a, hw } => {
                let s = out.shape();
                let (oh, ow) = (s[s.len() - 2], s[s.len() - 1]);
                acc(*a, kernels::upsample_bilinear_backward(g, hw.0, hw.1, oh, ow));
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<E: Float> {
    grads: Vec<Option<Vec<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Float> Gradients<E> {
    /// Gradient of a differentiable leaf; `None` when the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor<E>> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of a leaf, with zeros standing in for "no dependence".
    pub fn get_or_zeros(&self, v: Var) -> Tensor<E> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

pub(crate) fn sigmoid<E: Float>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp_fast())
    } else {
        let e = x.exp_fast();
        e / (E::one() + e)
    }
}

pub(crate) fn log_sigmoid<E: Float>(x: E) -> E {
    // -softplus(-x)
    if x >= E::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

struct MatMulGeom {
    batched: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_rows: usize,
    a_cols: usize,
    b_rows: usize,
    b_cols: usize,
    a_batched: bool,
    b_batched: bool,
}

impl MatMulGeom {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        let split = |s: &[usize], name: &str| -> Result<(Option<usize>, usize, usize)> {
            match s.len() {
                2 => Ok((None, s[0], s[1])),
                3 => Ok((Some(s[0]), s[1], s[2])),
                _ => arg_err(format!("matmul operand {name} must be rank 2 or 3, got {:?}", s)),
            }
        };
        let (ba, ar, ac) = split(a, "a")?;
        let (bb, br, bc) = split(b, "b")?;
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if ka != kb {
            return shape_err(format!("matmul inner extents differ: {:?} x {:?}", a, b));
        }
        let batch = match (ba, bb) {
            (Some(x), Some(y)) if x != y => {
                return shape_err(format!("matmul batch extents differ: {:?} x {:?}", a, b))
            }
            (Some(x), _) | (None, Some(x)) => x,
            (None, None) => 1,
        };
        Ok(MatMulGeom {
            batched: ba.is_some() || bb.is_some(),
            batch,
            m,
            k: ka,
            n,
            a_rows: ar,
            a_cols: ac,
            b_rows: br,
            b_cols: bc,
            a_batched: ba.is_some(),
            b_batched: bb.is_some(),
        })
    }

    fn a_view(&self, bi: usize, transposed: bool) -> kernels::MatView {
        let off = if self.a_batched { bi * self.a_rows * self.a_cols } else { 0 };
        kernels::MatView::stored(off, self.a_rows, self.a_cols, transposed)
    }

    fn b_view(&self, bi: usize, transposed: bool) -> kernels::MatView {
        let off = if self.b_batched { bi * self.b_rows * self.b_cols } else { 0 };
        kernels::MatView::stored(off, self.b_rows, self.b_cols, transposed)
    }

    fn c_view(&self, bi: usize, transposed: bool) -> kernels::MatView {
        kernels::MatView::stored(bi * self.m * self.n, self.m, self.n, transposed)
    }
}

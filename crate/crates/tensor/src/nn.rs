//! Parameterized layers built on the tape primitives.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{arg_err, Result};
use crate::float::Float;
use crate::param::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn uniform<E: Float>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<E> {
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = crate::numel(shape);
    Tensor::new(shape.to_vec(), (0..n).map(|_| E::of(dist.sample(rng))).collect()).expect("sized")
}

pub fn normal<E: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<E> {
    let n = crate::numel(shape);
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| E::of(std * Distribution::<f64>::sample(&StandardNormal, rng))).collect::<Vec<_>>(),
    )
    .expect("sized")
}

/// `y = x W + b` over the last axis, `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new<E: Float>(
        store: &mut ParamStore<E>,
        name: &str,
        inp: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (inp + out) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[inp, out], bound, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out]))?;
        Ok(Linear { weight, bias, inp, out })
    }

    pub fn forward<E: Float>(&self, tape: &mut Tape<E>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.inp) {
            return arg_err(format!("linear expects last extent {}, got {:?}", self.inp, shape));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, self.inp])? };
        let y = tape.matmul(flat, p.var(self.weight))?;
        let y = tape.add(y, p.var(self.bias))?;
        let mut oshape = shape;
        *oshape.last_mut().expect("rank >= 1") = self.out;
        if oshape.len() == 2 {
            Ok(y)
        } else {
            tape.reshape(y, &oshape)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<E: Float>(store: &mut ParamStore<E>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[d]))?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<E: Float>(&self, tape: &mut Tape<E>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), Self::EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<E: Float>(store: &mut ParamStore<E>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return arg_err(format!("{channels} channels not divisible into {groups} groups"));
        }
        Ok(GroupNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[channels]))?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]))?,
            groups,
        })
    }

    pub fn forward<E: Float>(&self, tape: &mut Tape<E>, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups, Self::EPS)
    }
}

/// 2-D or 3-D convolution with bias. Kernel extents are `[kt, kh, kw]`; a
/// 2-D layer has `kt == 1` and consumes `[B, C, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub two_d: bool,
}

impl Conv {
    /// Kaiming-uniform weight for ReLU fan-in, zero bias.
    #[allow(clippy::too_many_arguments)]
    fn build<E: Float>(
        store: &mut ParamStore<E>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        two_d: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = cin * kernel.iter().product::<usize>();
        let bound = (6.0 / fan_in as f64).sqrt();
        let shape: Vec<usize> = if two_d {
            vec![cout, cin, kernel[1], kernel[2]]
        } else {
            vec![cout, cin, kernel[0], kernel[1], kernel[2]]
        };
        Ok(Conv {
            weight: store.add(format!("{name}.weight"), uniform(&shape, bound, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            kernel,
            stride,
            pad,
            two_d,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new2d<E: Float>(
        store: &mut ParamStore<E>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(store, name, cin, cout, [1, k, k], [1, stride, stride], [0, pad, pad], true, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new3d<E: Float>(
        store: &mut ParamStore<E>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(store, name, cin, cout, [k; 3], [stride; 3], [pad; 3], false, rng)
    }

    pub fn forward<E: Float>(&self, tape: &mut Tape<E>, p: &Bound, x: Var) -> Result<Var> {
        let (w, b) = (p.var(self.weight), p.var(self.bias));
        if self.two_d {
            tape.conv2d(x, w, Some(b), [self.stride[1], self.stride[2]], [self.pad[1], self.pad[2]])
        } else {
            tape.conv3d(x, w, Some(b), self.stride, self.pad)
        }
    }
}

/// Multi-head scaled dot-product attention assembled from matmul, softmax
/// and reshapes. Inputs are `[L, d]` or batched `[B, L, d]`.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

/// Output of [`MultiHeadAttention::forward`].
pub struct Attended {
    pub out: Var,
    /// Attention probabilities, `[B·heads, Lq, Lk]`.
    pub probs: Var,
}

impl MultiHeadAttention {
    pub fn new<E: Float>(
        store: &mut ParamStore<E>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return arg_err(format!("width {d} not divisible by {heads} heads"));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            heads,
            d,
        })
    }

    pub fn forward<E: Float>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Attended> {
        let batched = tape.shape(query).len() == 3;
        let q = self.q.forward(tape, p, query)?;
        let k = self.k.forward(tape, p, key)?;
        let v = self.v.forward(tape, p, value)?;
        let (b, lq) = batch_len(tape.shape(q));
        let (_, lk) = batch_len(tape.shape(k));
        let probs = self.probs_from_projected(tape, q, k)?;
        let vh = split_heads(tape, v, self.heads)?;
        let ctx = tape.matmul(probs, vh)?;
        let dh = self.d / self.heads;
        let ctx = tape.reshape(ctx, &[b, self.heads, lq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = if batched {
            tape.reshape(ctx, &[b, lq, self.d])?
        } else {
            tape.reshape(ctx, &[lq, self.d])?
        };
        let out = self.o.forward(tape, p, ctx)?;
        let _ = lk;
        Ok(Attended { out, probs })
    }

    /// Softmax attention weights `[B·heads, Lq, Lk]` from already projected
    /// queries and keys.
    pub fn probs_from_projected<E: Float>(&self, tape: &mut Tape<E>, q: Var, k: Var) -> Result<Var> {
        let dh = self.d / self.heads;
        let qh = split_heads(tape, q, self.heads)?;
        let qh = tape.scale(qh, 1.0 / (dh as f64).sqrt());
        let kh = split_heads(tape, k, self.heads)?;
        let scores = tape.matmul_t(qh, kh, false, true)?;
        tape.softmax(scores, 2)
    }
}

fn batch_len(shape: &[usize]) -> (usize, usize) {
    if shape.len() == 3 {
        (shape[0], shape[1])
    } else {
        (1, shape[0])
    }
}

/// `[B, L, d]` or `[L, d]` to `[B·heads, L, d/heads]`.
pub fn split_heads<E: Float>(tape: &mut Tape<E>, x: Var, heads: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, l) = batch_len(&shape);
    let d = *shape.last().expect("rank >= 2");
    let dh = d / heads;
    let x = tape.reshape(x, &[b, l, heads, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, l, dh])
}

//! Raw slice kernels behind the recorded ops. Everything here is row-major
//! and allocation-explicit; shape validation happens in the tape layer.

use rayon::prelude::*;

use crate::error::{arg_err, shape_err, Result};
use crate::float::Float;
use crate::tensor::{numel, strides};
use crate::deterministic;

pub fn permute<E: Float>(data: &[E], shape: &[usize], axes: &[usize]) -> Result<Vec<E>> {
    let rank = shape.len();
    if axes.len() != rank {
        return arg_err(format!("permutation {:?} for rank {}", axes, rank));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return arg_err(format!("invalid permutation {:?}", axes));
        }
        seen[a] = true;
    }
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    if rank == 0 {
        out.push(data[0]);
        return Ok(out);
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_step = step[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..inner {
            out.push(data[off]);
            off += inner_step;
        }
        // advance the outer counter
        let mut ax = last;
        loop {
            if ax == 0 {
                return Ok(out);
            }
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// For every element of `out`, the linear offset of the source element of a
/// tensor with shape `inp` broadcast to `out`.
pub fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - inp.len();
    let in_strides = strides(inp);
    let step: Vec<usize> = (0..rank)
        .map(|i| if i < pad || inp[i - pad] == 1 { 0 } else { in_strides[i - pad] })
        .collect();
    let n = numel(out);
    let mut offs = Vec::with_capacity(n);
    if n == 0 {
        return offs;
    }
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        offs.push(cur);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            cur += step[ax];
            if idx[ax] < out[ax] {
                break;
            }
            cur -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offs
}

/// Sums a gradient of shape `out` back onto a broadcast operand of shape `inp`.
pub fn reduce_broadcast<E: Float>(grad: &[E], out: &[usize], inp: &[usize]) -> Vec<E> {
    if out == inp {
        return grad.to_vec();
    }
    let mut acc = vec![E::zero(); numel(inp)];
    for (g, o) in grad.iter().zip(broadcast_offsets(out, inp)) {
        acc[o] += *g;
    }
    acc
}

/// Strided 2-D view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub off: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    /// View of a stored `rows×cols` row-major block, optionally transposed.
    pub fn stored(off: usize, rows: usize, cols: usize, transposed: bool) -> Self {
        let _ = rows;
        if transposed {
            MatView { off, rs: 1, cs: cols as isize }
        } else {
            MatView { off, rs: cols as isize, cs: 1 }
        }
    }
}

/// `C[m×n] = alpha·A[m×k]·B[k×n] + beta·C` on strided views.
#[allow(clippy::too_many_arguments)]
pub fn gemm<E: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    av: MatView,
    b: &[E],
    bv: MatView,
    beta: E,
    c: &mut [E],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds of each view, checked before handing raw pointers to the gemm.
    let extent = |v: MatView, r: usize, cc: usize| {
        v.off as isize + (r as isize - 1).max(0) * v.rs + (cc as isize - 1).max(0) * v.cs
    };
    if k > 0 {
        assert!(extent(av, m, k) < a.len() as isize);
        assert!(extent(bv, k, n) < b.len() as isize);
    }
    assert!(extent(cv, m, n) < c.len() as isize);
    unsafe {
        E::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.off),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs,
            cv.cs,
        );
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<E: Float>(x: &[E], shape: &[usize], axis: usize, log: bool) -> Vec<E> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![E::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = E::neg_infinity();
            for a in 0..len {
                mx = mx.max(x[base + a * inner]);
            }
            let mut sum = E::zero();
            for a in 0..len {
                let e = (x[base + a * inner] - mx).exp_fast();
                out[base + a * inner] = e;
                sum += e;
            }
            if log {
                let ls = sum.ln();
                for a in 0..len {
                    out[base + a * inner] = x[base + a * inner] - mx - ls;
                }
            } else {
                let inv = E::one() / sum;
                for a in 0..len {
                    out[base + a * inner] *= inv;
                }
            }
        }
    }
    out
}

/// Eight-lane sum; the independent accumulators let the loop vectorize.
#[inline]
pub fn lane_sum<E: Float>(xs: &[E]) -> E {
    let mut acc = [E::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    acc.iter().copied().sum::<E>() + chunks.remainder().iter().copied().sum::<E>()
}

#[inline]
fn lane_max<E: Float>(xs: &[E]) -> E {
    let mut acc = [E::neg_infinity(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    let rest = chunks.remainder().iter().fold(E::neg_infinity(), |m, &v| if v > m { v } else { m });
    acc.iter().fold(rest, |m, &v| if v > m { v } else { m })
}

/// Contiguous last-axis softmax, the hot path inside attention.
pub fn softmax_rows<E: Float>(x: &[E], len: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for (row, o) in x.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
        let mx = lane_max(row);
        for (d, &v) in o.iter_mut().zip(row) {
            *d = (v - mx).exp_fast();
        }
        let inv = E::one() / lane_sum(o);
        for d in o.iter_mut() {
            *d *= inv;
        }
    }
    out
}

pub fn softmax_backward<E: Float>(
    y: &[E],
    dy: &[E],
    shape: &[usize],
    axis: usize,
    log: bool,
) -> Vec<E> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![E::zero(); y.len()];
    if inner == 1 && !log {
        for ((ys, ds), out) in y.chunks_exact(len).zip(dy.chunks_exact(len)).zip(dx.chunks_exact_mut(len)) {
            let mut acc = [E::zero(); 8];
            let (mut yc, mut dc) = (ys.chunks_exact(8), ds.chunks_exact(8));
            for (a8, b8) in (&mut yc).zip(&mut dc) {
                for ((a, &p), &q) in acc.iter_mut().zip(a8).zip(b8) {
                    *a += p * q;
                }
            }
            let s = acc.iter().copied().sum::<E>()
                + yc.remainder().iter().zip(dc.remainder()).map(|(&p, &q)| p * q).sum::<E>();
            for ((o, &p), &q) in out.iter_mut().zip(ys).zip(ds) {
                *o = p * (q - s);
            }
        }
        return dx;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            if log {
                // y = log p; dx = dy - p * sum(dy)
                let mut s = E::zero();
                for a in 0..len {
                    s += dy[base + a * inner];
                }
                for a in 0..len {
                    let k = base + a * inner;
                    dx[k] = dy[k] - y[k].exp_fast() * s;
                }
            } else {
                let mut s = E::zero();
                for a in 0..len {
                    let k = base + a * inner;
                    s += dy[k] * y[k];
                }
                for a in 0..len {
                    let k = base + a * inner;
                    dx[k] = y[k] * (dy[k] - s);
                }
            }
        }
    }
    dx
}

/// Normalization statistics over contiguous groups of `group_len` elements.
#[derive(Debug)]
pub struct NormStats<E> {
    pub mean: Vec<E>,
    pub rstd: Vec<E>,
}

pub fn group_stats<E: Float>(x: &[E], group_len: usize, eps: E) -> NormStats<E> {
    let groups = x.len() / group_len;
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    let inv_n = E::one() / E::of(group_len as f64);
    for g in x.chunks_exact(group_len) {
        let m = g.iter().copied().sum::<E>() * inv_n;
        let v = g.iter().map(|&v| (v - m) * (v - m)).sum::<E>() * inv_n;
        mean.push(m);
        rstd.push(E::one() / (v + eps).sqrt());
    }
    NormStats { mean, rstd }
}

/// Gradient of `xhat = (x - mean) * rstd` per group, given `dxhat`.
pub fn normalize_backward<E: Float>(
    x: &[E],
    dxhat: &[E],
    group_len: usize,
    stats: &NormStats<E>,
) -> Vec<E> {
    let mut dx = vec![E::zero(); x.len()];
    let inv_n = E::one() / E::of(group_len as f64);
    for (g, ((xs, ds), out)) in x
        .chunks_exact(group_len)
        .zip(dxhat.chunks_exact(group_len))
        .zip(dx.chunks_exact_mut(group_len))
        .enumerate()
    {
        let (m, r) = (stats.mean[g], stats.rstd[g]);
        let mut sum_d = E::zero();
        let mut sum_dx = E::zero();
        for (&xv, &dv) in xs.iter().zip(ds) {
            sum_d += dv;
            sum_dx += dv * (xv - m) * r;
        }
        let md = sum_d * inv_n;
        let mdx = sum_dx * inv_n;
        for ((o, &xv), &dv) in out.iter_mut().zip(xs).zip(ds) {
            *o = r * (dv - md - (xv - m) * r * mdx);
        }
    }
    dx
}

/// Geometry of a 3-D convolution over `[B, C, T, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        if input_shape.len() != 5 || kernel_shape.len() != 5 {
            return arg_err(format!(
                "conv3d expects rank-5 input and kernel, got {:?} and {:?}",
                input_shape, kernel_shape
            ));
        }
        if input_shape[1] != kernel_shape[1] {
            return arg_err(format!(
                "conv3d channel mismatch: input has {}, kernel expects {}",
                input_shape[1], kernel_shape[1]
            ));
        }
        if stride.contains(&0) {
            return arg_err("conv3d stride must be positive");
        }
        let mut output = [0; 3];
        for d in 0..3 {
            let span = input_shape[2 + d] + 2 * pad[d];
            if span < kernel_shape[2 + d] {
                return arg_err(format!(
                    "conv3d kernel {:?} larger than padded input {:?}",
                    kernel_shape, input_shape
                ));
            }
            output[d] = (span - kernel_shape[2 + d]) / stride[d] + 1;
        }
        Ok(ConvGeom {
            batch: input_shape[0],
            cin: input_shape[1],
            cout: kernel_shape[0],
            input: [input_shape[2], input_shape[3], input_shape[4]],
            kernel: [kernel_shape[2], kernel_shape[3], kernel_shape[4]],
            stride,
            pad,
            output,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.output[0], self.output[1], self.output[2]]
    }

    /// Calls `f(row, position, input_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [it, ih, iw] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let vol = self.in_volume();
        let mut row = 0;
        for c in 0..self.cin {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        for zt in 0..ot {
                            let t = (zt * st + dt) as isize - pt as isize;
                            if t < 0 || t >= it as isize {
                                continue;
                            }
                            for zh in 0..oh {
                                let h = (zh * sh + dh) as isize - ph as isize;
                                if h < 0 || h >= ih as isize {
                                    continue;
                                }
                                let pos_base = (zt * oh + zh) * ow;
                                let in_base = c * vol + (t as usize * ih + h as usize) * iw;
                                for zw in 0..ow {
                                    let w = (zw * sw + dw) as isize - pw as isize;
                                    if w < 0 || w >= iw as isize {
                                        continue;
                                    }
                                    f(row, pos_base + zw, in_base + w as usize);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col<E: Float>(&self, input: &[E]) -> Vec<E> {
        let p = self.out_positions();
        let mut col = vec![E::zero(); self.col_rows() * p];
        self.for_each_tap(|row, pos, off| col[row * p + pos] = input[off]);
        col
    }

    fn col2im<E: Float>(&self, col: &[E], dinput: &mut [E]) {
        let p = self.out_positions();
        self.for_each_tap(|row, pos, off| dinput[off] += col[row * p + pos]);
    }
}

pub fn conv3d_forward<E: Float>(
    g: &ConvGeom,
    input: &[E],
    kernel: &[E],
    bias: Option<&[E]>,
) -> Vec<E> {
    let p = g.out_positions();
    let rows = g.col_rows();
    let in_stride = g.cin * g.in_volume();
    let out_stride = g.cout * p;
    let mut out = vec![E::zero(); g.batch * out_stride];
    let run = |(b, o): (usize, &mut [E])| {
        let col = g.im2col(&input[b * in_stride..(b + 1) * in_stride]);
        gemm(
            g.cout,
            rows,
            p,
            E::one(),
            kernel,
            MatView::stored(0, g.cout, rows, false),
            &col,
            MatView::stored(0, rows, p, false),
            E::zero(),
            o,
            MatView::stored(0, g.cout, p, false),
        );
        if let Some(bias) = bias {
            for (co, chunk) in o.chunks_exact_mut(p).enumerate() {
                for v in chunk {
                    *v += bias[co];
                }
            }
        }
    };
    if g.batch > 1 && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(out_stride).enumerate().for_each(run);
    } else {
        out.chunks_mut(out_stride).enumerate().for_each(run);
    }
    out
}

pub struct ConvGrads<E> {
    pub input: Option<Vec<E>>,
    pub kernel: Option<Vec<E>>,
    pub bias: Option<Vec<E>>,
}

pub fn conv3d_backward<E: Float>(
    g: &ConvGeom,
    input: &[E],
    kernel: &[E],
    dout: &[E],
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> ConvGrads<E> {
    let p = g.out_positions();
    let rows = g.col_rows();
    let in_stride = g.cin * g.in_volume();
    let out_stride = g.cout * p;

    let bias = need_bias.then(|| {
        let mut db = vec![E::zero(); g.cout];
        for b in 0..g.batch {
            for (co, chunk) in dout[b * out_stride..(b + 1) * out_stride].chunks_exact(p).enumerate() {
                db[co] += chunk.iter().copied().sum::<E>();
            }
        }
        db
    });

    let kernel_grad_for = |b: usize| {
        let col = g.im2col(&input[b * in_stride..(b + 1) * in_stride]);
        let mut dk = vec![E::zero(); g.cout * rows];
        gemm(
            g.cout,
            p,
            rows,
            E::one(),
            &dout[b * out_stride..],
            MatView::stored(0, g.cout, p, false),
            &col,
            MatView::stored(0, rows, p, true),
            E::zero(),
            &mut dk,
            MatView::stored(0, g.cout, rows, false),
        );
        dk
    };
    let add = |mut a: Vec<E>, b: Vec<E>| {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
        a
    };
    let kernel_grad = need_kernel.then(|| {
        if deterministic() || rayon::current_num_threads() == 1 {
            (0..g.batch).map(kernel_grad_for).fold(vec![E::zero(); g.cout * rows], add)
        } else {
            (0..g.batch)
                .into_par_iter()
                .map(kernel_grad_for)
                .reduce(|| vec![E::zero(); g.cout * rows], add)
        }
    });

    let input_grad = need_input.then(|| {
        let mut din = vec![E::zero(); g.batch * in_stride];
        let run = |(b, d): (usize, &mut [E])| {
            let mut dcol = vec![E::zero(); rows * p];
            gemm(
                rows,
                g.cout,
                p,
                E::one(),
                kernel,
                MatView::stored(0, g.cout, rows, true),
                &dout[b * out_stride..],
                MatView::stored(0, g.cout, p, false),
                E::zero(),
                &mut dcol,
                MatView::stored(0, rows, p, false),
            );
            g.col2im(&dcol, d);
        };
        if g.batch > 1 && rayon::current_num_threads() > 1 {
            din.par_chunks_mut(in_stride).enumerate().for_each(run);
        } else {
            din.chunks_mut(in_stride).enumerate().for_each(run);
        }
        din
    });

    ConvGrads { input: input_grad, kernel: kernel_grad, bias }
}

/// Source taps for one output coordinate of a linear resize with
/// half-pixel centers (no corner alignment).
#[derive(Clone, Copy, Debug)]
pub struct Taps<E> {
    pub i0: usize,
    pub i1: usize,
    pub w0: E,
    pub w1: E,
}

pub fn linear_taps<E: Float>(input: usize, output: usize) -> Vec<Taps<E>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            Taps { i0, i1, w0: E::of(1.0 - l1), w1: E::of(l1) }
        })
        .collect()
}

/// Bilinear resize of the trailing two axes.
pub fn upsample_bilinear<E: Float>(x: &[E], h: usize, w: usize, oh: usize, ow: usize) -> Vec<E> {
    let ty = linear_taps::<E>(h, oh);
    let tx = linear_taps::<E>(w, ow);
    let planes = x.len() / (h * w);
    let mut out = vec![E::zero(); planes * oh * ow];
    for (src, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for (y, t) in ty.iter().enumerate() {
            let r0 = &src[t.i0 * w..(t.i0 + 1) * w];
            let r1 = &src[t.i1 * w..(t.i1 + 1) * w];
            for (xo, s) in tx.iter().enumerate() {
                let top = r0[s.i0] * s.w0 + r0[s.i1] * s.w1;
                let bot = r1[s.i0] * s.w0 + r1[s.i1] * s.w1;
                dst[y * ow + xo] = top * t.w0 + bot * t.w1;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<E: Float>(
    dy: &[E],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let ty = linear_taps::<E>(h, oh);
    let tx = linear_taps::<E>(w, ow);
    let planes = dy.len() / (oh * ow);
    let mut dx = vec![E::zero(); planes * h * w];
    for (g, d) in dy.chunks_exact(oh * ow).zip(dx.chunks_exact_mut(h * w)) {
        for (y, t) in ty.iter().enumerate() {
            for (xo, s) in tx.iter().enumerate() {
                let v = g[y * ow + xo];
                d[t.i0 * w + s.i0] += v * t.w0 * s.w0;
                d[t.i0 * w + s.i1] += v * t.w0 * s.w1;
                d[t.i1 * w + s.i0] += v * t.w1 * s.w0;
                d[t.i1 * w + s.i1] += v * t.w1 * s.w1;
            }
        }
    }
    dx
}

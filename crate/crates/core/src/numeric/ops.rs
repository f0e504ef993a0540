//! Forward definitions and gradient rules for every tape operation.

use super::tape::{Node, Tape, Var};
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Exp,
    Log,
    Square,
    Sqrt,
    Softplus,
    Neg,
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Square => "square",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Neg => "neg",
        }
    }
}

/// Geometry of a stride-1 NHWC convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cout: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddScalar {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SumAll {
        x: Var,
    },
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    SelectCols {
        x: Var,
        idx: Vec<usize>,
    },
    SqDist {
        a: Var,
        b: Var,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } | Op::SqDist { a, b } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::SumAll { x }
            | Op::SumAxis { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Reshape { x }
            | Op::MaxPool { x, .. }
            | Op::BatchNorm { x, .. }
            | Op::Softmax { x }
            | Op::LogSoftmax { x }
            | Op::SelectCols { x, .. }
            | Op::L2NormalizeRows { x, .. } => vec![*x],
        }
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes; returns the output shape and the
/// per-dimension input strides (zero on broadcast dimensions).
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        out.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return None,
        });
    }
    let strides = |p: &[usize]| {
        let raw = row_major_strides(p);
        p.iter()
            .zip(&out)
            .zip(raw)
            .map(|((&d, &o), s)| if d == 1 && o != 1 { 0 } else { s })
            .collect::<Vec<_>>()
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    Some((out, sa, sb))
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut base_a, mut base_b, mut o) = (0usize, 0usize, 0usize);
    loop {
        for j in 0..inner {
            f(o, base_a + j * ia, base_b + j * ib);
            o += 1;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// When `a` already has the output shape and `b` equals its trailing
/// dimensions (or is a single value), returns the repeat period of `b`.
fn trailing_period(a: &[usize], b: &[usize], out: &[usize]) -> Option<usize> {
    if a != out {
        return None;
    }
    let blen: usize = b.iter().product();
    if blen == 1 {
        return Some(*out.last()?);
    }
    let b = &b[b.iter().position(|&d| d != 1)?..];
    if b.len() <= out.len() && out[out.len() - b.len()..] == *b {
        Some(blen)
    } else {
        None
    }
}

fn swap((r, c): (isize, isize)) -> (isize, isize) {
    (c, r)
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (out, sa, sb) = broadcast_shapes(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::shape(kind.name(), self.shape(a), self.shape(b)))?;
        let len = out.iter().product();
        let mut value = vec![T::zero(); len];
        {
            let (av, bv) = (self.value(a), self.value(b));
            let apply = |x: T, y: T| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            match trailing_period(self.shape(a), self.shape(b), &out) {
                Some(period) => {
                    for (vr, ar) in value.chunks_exact_mut(period).zip(av.chunks_exact(period)) {
                        let br = &bv[bv.len() - period.min(bv.len())..];
                        if br.len() == period {
                            for ((v, &x), &y) in vr.iter_mut().zip(ar).zip(br) {
                                *v = apply(x, y);
                            }
                        } else {
                            for (v, &x) in vr.iter_mut().zip(ar) {
                                *v = apply(x, br[0]);
                            }
                        }
                    }
                }
                None => for_each_broadcast(&out, &sa, &sb, |o, i, j| value[o] = apply(av[i], bv[j])),
            }
        }
        Ok(self.push(kind.name(), out, value, Op::Binary { kind, a, b }))
    }

    /// Elementwise `a + b` with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(T::zero()),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Square => v * v,
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Neg => -v,
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(kind.name(), shape, value, Op::Unary { kind, x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::of(factor);
        let value = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, value, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, value, Op::AddScalar { x })
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let a_strides = if ta { (1, m as isize) } else { (k as isize, 1) };
        let b_strides = if tb { (1, k as isize) } else { (n as isize, 1) };
        let mut value = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), a_strides, self.value(b), b_strides, T::zero(), &mut value);
        Ok(self.push("matmul", vec![m, n], value, Op::MatMul { a, b, ta, tb }))
    }

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `aᵀ · b` without materialising the transpose.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::SumAll { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Invalid(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in value[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.push("sum_axis", out_shape, value, Op::SumAxis { x, outer, len, inner }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::Invalid(format!("mean_axis: axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Invalid(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            "concat",
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
        ))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(Error::Invalid(format!(
                "slice_rows {start}..{} out of range for {shape:?}",
                start + len
            )));
        }
        let row: usize = shape[1..].iter().product();
        let value = self.value(x)[start * row..(start + len) * row].to_vec();
        let mut out = shape;
        out[0] = len;
        Ok(self.push("slice_rows", out, value, Op::SliceRows { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        Ok(self.push("reshape", shape.to_vec(), value, Op::Reshape { x }))
    }

    /// Stride-1 convolution of NHWC input `x` with weights `[k, k, cin, cout]`
    /// and symmetric zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || xs[3] != ws[2] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let k = ws[0];
        if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let geom = ConvGeom {
            batch: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            k,
            pad,
            ho: xs[1] + 2 * pad - k + 1,
            wo: xs[2] + 2 * pad - k + 1,
            cout: ws[3],
        };
        let cols = im2col(self.value(x), &geom);
        let (rows, patch) = (geom.rows(), geom.patch());
        let mut value = vec![T::zero(); rows * geom.cout];
        T::gemm(
            rows,
            patch,
            geom.cout,
            &cols,
            (patch as isize, 1),
            self.value(w),
            (geom.cout as isize, 1),
            T::zero(),
            &mut value,
        );
        let cols = if self.requires_grad(w) { cols } else { Vec::new() };
        let shape = vec![geom.batch, geom.ho, geom.wo, geom.cout];
        Ok(self.push("conv2d", shape, value, Op::Conv2d { x, w, geom, cols }))
    }

    /// 2×2 max pooling with stride 2 on NHWC input; odd trailing rows and
    /// columns are dropped.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::shape("maxpool2d", &s, &[2, 2]));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(b * ho * wo * c);
        let mut argmax = Vec::with_capacity(b * ho * wo * c);
        for n in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = T::neg_infinity();
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((n * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if best == usize::MAX || xv[i] > best_v {
                                    best = i;
                                    best_v = xv[i];
                                }
                            }
                        }
                        value.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        Ok(self.push("maxpool2d", vec![b, ho, wo, c], value, Op::MaxPool { x, argmax }))
    }

    /// Normalizes every channel (last axis) to zero mean and unit variance
    /// using statistics of the whole batch. Returns the output and the batch
    /// mean and biased variance per channel.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::Invalid("batch_norm on rank-0".into()))?;
        let xv = self.value(x);
        let n = xv.len() / c;
        let mut mean = vec![0f64; c];
        for row in xv.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0f64; c];
        for row in xv.chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let mut value = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(c) {
            for ((&v, &m), &s) in row.iter().zip(&mean_t).zip(&inv_std) {
                value.push((v - m) * s);
            }
        }
        let stats_mean = mean.iter().map(|&m| m as f32).collect();
        let stats_var = var.iter().map(|&v| v as f32).collect();
        let out = self.push("batch_norm", shape, value, Op::BatchNorm { x, inv_std });
        Ok((out, stats_mean, stats_var))
    }

    fn row_view(&self, x: Var, op: &'static str) -> Result<usize> {
        let s = self.shape(x);
        s.last()
            .copied()
            .filter(|&c| c > 0)
            .ok_or_else(|| Error::shape(op, s, &[]))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.row_view(x, "softmax")?;
        let mut value = self.value(x).to_vec();
        for row in value.chunks_exact_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push("softmax", shape, value, Op::Softmax { x }))
    }

    /// Log-softmax over the last axis, max-subtracted.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.row_view(x, "log_softmax")?;
        let mut value = self.value(x).to_vec();
        for row in value.chunks_exact_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push("log_softmax", shape, value, Op::LogSoftmax { x }))
    }

    /// `out[i] = x[i, idx[i]]` for a 2-D `x`.
    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&j| j >= s[1]) {
            return Err(Error::shape("select_cols", &s, &[idx.len()]));
        }
        let xv = self.value(x);
        let value = idx.iter().enumerate().map(|(i, &j)| xv[i * s[1] + j]).collect();
        Ok(self.push("select_cols", vec![idx.len()], value, Op::SelectCols { x, idx: idx.to_vec() }))
    }

    /// Pairwise squared Euclidean distances between rows: `[n, k] × [m, k] → [n, m]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("sq_dist", sa, sb));
        }
        let (n, m, k) = (sa[0], sb[0], sa[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = &av[i * k..(i + 1) * k];
            for j in 0..m {
                let rb = &bv[j * k..(j + 1) * k];
                value.push(ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
        }
        Ok(self.push("sq_dist", vec![n, m], value, Op::SqDist { a, b }))
    }

    /// `x_i / (‖x_i‖ + eps)` for every row of a 2-D `x`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("l2_normalize_rows", &s, &[]));
        }
        let eps = T::of(eps);
        let k = s[1];
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(s[0]);
        let mut value = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(k) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            value.extend(row.iter().map(|&v| v / (n + eps)));
        }
        Ok(self.push("l2_normalize_rows", s, value, Op::L2NormalizeRows { x, norms, eps }))
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.k {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let iy = iy - g.pad;
                    for kx in 0..g.k {
                        let ix = ox + kx;
                        if ix < g.pad || ix - g.pad >= g.w {
                            continue;
                        }
                        let ix = ix - g.pad;
                        let src = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let dst = row + (ky * g.k + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc<T: Real>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let patch = g.patch();
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.k {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let iy = iy - g.pad;
                    for kx in 0..g.k {
                        let ix = ox + kx;
                        if ix < g.pad || ix - g.pad >= g.w {
                            continue;
                        }
                        let ix = ix - g.pad;
                        let dst = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let src = row + (ky * g.k + kx) * g.cin;
                        for (d, &s) in gx[dst..dst + g.cin].iter_mut().zip(&cols[src..src + g.cin]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

fn backprop_trailing<T: Real>(kind: BinaryKind, period: usize, _av: &[T], bv: &[T], g: &[T], ga: Option<&mut [T]>) {
    let Some(ga) = ga else { return };
    for (dr, gr) in ga.chunks_exact_mut(period).zip(g.chunks_exact(period)) {
        for j in 0..period {
            let bj = if bv.len() == 1 { bv[0] } else { bv[j] };
            dr[j] = dr[j]
                + match kind {
                    BinaryKind::Add | BinaryKind::Sub => gr[j],
                    BinaryKind::Mul => gr[j] * bj,
                    BinaryKind::Div => gr[j] / bj,
                };
        }
    }
}

fn grad_buf<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

/// Propagates `g = dL/d(node i)` into the gradient buffers of node `i`'s inputs.
pub(crate) fn backprop<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (_, sa, sb) = broadcast_shapes(&nodes[a.0].shape, &nodes[b.0].shape).expect("recorded shapes");
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(period) = trailing_period(&nodes[a.0].shape, &nodes[b.0].shape, &node.shape) {
                backprop_trailing(*kind, period, av, bv, g, grad_buf(nodes, grads, *a).map(|v| v.as_mut_slice()));
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    let mut acc = vec![T::zero(); period];
                    for (gr, ar) in g.chunks_exact(period).zip(av.chunks_exact(period)) {
                        for j in 0..period {
                            let bj = if bv.len() == 1 { bv[0] } else { bv[j] };
                            acc[j] = acc[j]
                                + match kind {
                                    BinaryKind::Add => gr[j],
                                    BinaryKind::Sub => -gr[j],
                                    BinaryKind::Mul => gr[j] * ar[j],
                                    BinaryKind::Div => -gr[j] * ar[j] / (bj * bj),
                                };
                        }
                    }
                    if gb.len() == 1 {
                        gb[0] = gb[0] + acc.into_iter().sum::<T>();
                    } else {
                        gb.iter_mut().zip(acc).for_each(|(d, s)| *d = *d + s);
                    }
                }
                return;
            }
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for_each_broadcast(&node.shape, &sa, &sb, |o, ia, ib| {
                    ga[ia] = ga[ia]
                        + match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[o],
                            BinaryKind::Mul => g[o] * bv[ib],
                            BinaryKind::Div => g[o] / bv[ib],
                        }
                });
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for_each_broadcast(&node.shape, &sa, &sb, |o, ia, ib| {
                    gb[ib] = gb[ib]
                        + match kind {
                            BinaryKind::Add => g[o],
                            BinaryKind::Sub => -g[o],
                            BinaryKind::Mul => g[o] * av[ia],
                            BinaryKind::Div => -g[o] * av[ia] / (bv[ib] * bv[ib]),
                        }
                });
            }
        }
        Op::Unary { kind, x } => {
            let xv = &nodes[x.0].value;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let two = T::of(2.0);
                for j in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Relu => {
                            if xv[j] > T::zero() {
                                g[j]
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Exp => g[j] * y[j],
                        UnaryKind::Log => g[j] / xv[j],
                        UnaryKind::Square => g[j] * two * xv[j],
                        UnaryKind::Sqrt => g[j] / (two * y[j]),
                        UnaryKind::Softplus => g[j] * sigmoid(xv[j]),
                        UnaryKind::Neg => -g[j],
                    };
                    gx[j] = gx[j] + d;
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * *factor);
            }
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let (sa_shape, sb_shape) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k) = if *ta { (sa_shape[1], sa_shape[0]) } else { (sa_shape[0], sa_shape[1]) };
            let n = if *tb { sb_shape[0] } else { sb_shape[1] };
            let sa = if *ta { (1, m as isize) } else { (k as isize, 1) };
            let sb = if *tb { (1, k as isize) } else { (n as isize, 1) };
            let sg = (n as isize, 1);
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                if *ta {
                    T::gemm(k, n, m, bv, sb, g, swap(sg), T::one(), ga);
                } else {
                    T::gemm(m, n, k, g, sg, bv, swap(sb), T::one(), ga);
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                if *tb {
                    T::gemm(n, m, k, g, swap(sg), av, sa, T::one(), gb);
                } else {
                    T::gemm(k, m, n, av, swap(sa), g, sg, T::one(), gb);
                }
            }
        }
        Op::SumAll { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::SumAxis { x, outer, len, inner } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        for (d, &s) in gx[base..base + inner].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
        Op::Concat { parts, outer, widths } => {
            let row: usize = widths.iter().sum();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                if let Some(gp) = grad_buf(nodes, grads, p) {
                    for o in 0..*outer {
                        let src = &g[o * row + offset..o * row + offset + w];
                        for (d, &s) in gp[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::SliceRows { x, start } => {
            let row: usize = nodes[x.0].shape[1..].iter().product();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let base = start * row;
                for (d, &s) in gx[base..base + g.len()].iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
        }
        Op::Conv2d { x, w, geom, cols } => {
            let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
            if let Some(gw) = grad_buf(nodes, grads, *w) {
                T::gemm(patch, rows, cout, cols, (1, patch as isize), g, (cout as isize, 1), T::one(), gw);
            }
            if nodes[x.0].needs_grad {
                let mut dcols = vec![T::zero(); rows * patch];
                T::gemm(
                    rows,
                    cout,
                    patch,
                    g,
                    (cout as isize, 1),
                    &nodes[w.0].value,
                    (1, cout as isize),
                    T::zero(),
                    &mut dcols,
                );
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    col2im_acc(&dcols, geom, gx);
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (&src, &s) in argmax.iter().zip(g) {
                    gx[src] = gx[src] + s;
                }
            }
        }
        Op::BatchNorm { x, inv_std } => {
            let c = inv_std.len();
            let n = y.len() / c;
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gy = vec![T::zero(); c];
            for (gr, yr) in g.chunks_exact(c).zip(y.chunks_exact(c)) {
                for ch in 0..c {
                    sum_g[ch] = sum_g[ch] + gr[ch];
                    sum_gy[ch] = sum_gy[ch] + gr[ch] * yr[ch];
                }
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let nf = T::of(n as f64);
                for ((dr, gr), yr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                    for ch in 0..c {
                        let d = inv_std[ch] / nf * (nf * gr[ch] - sum_g[ch] - yr[ch] * sum_gy[ch]);
                        dr[ch] = dr[ch] + d;
                    }
                }
            }
        }
        Op::Softmax { x } => {
            let c = *node.shape.last().expect("rank ≥ 1");
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((dr, gr), yr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax { x } => {
            let c = *node.shape.last().expect("rank ≥ 1");
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((dr, gr), yr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..c {
                        dr[j] = dr[j] + gr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::SelectCols { x, idx } => {
            let cols = nodes[x.0].shape[1];
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (r, (&j, &s)) in idx.iter().zip(g).enumerate() {
                    gx[r * cols + j] = gx[r * cols + j] + s;
                }
            }
        }
        Op::SqDist { a, b } => {
            let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let m = nodes[b.0].shape[0];
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let two = T::of(2.0);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for i in 0..n {
                    for j in 0..m {
                        let s = two * g[i * m + j];
                        for l in 0..k {
                            ga[i * k + l] = ga[i * k + l] + s * (av[i * k + l] - bv[j * k + l]);
                        }
                    }
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for i in 0..n {
                    for j in 0..m {
                        let s = two * g[i * m + j];
                        for l in 0..k {
                            gb[j * k + l] = gb[j * k + l] + s * (bv[j * k + l] - av[i * k + l]);
                        }
                    }
                }
            }
        }
        Op::L2NormalizeRows { x, norms, eps } => {
            let k = node.shape[1];
            let xv = &nodes[x.0].value;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (r, &n) in norms.iter().enumerate() {
                    let xr = &xv[r * k..(r + 1) * k];
                    let gr = &g[r * k..(r + 1) * k];
                    let denom = n + *eps;
                    let coupling = if n > T::zero() {
                        let dot: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        dot / (n * denom * denom)
                    } else {
                        T::zero()
                    };
                    for l in 0..k {
                        gx[r * k + l] = gx[r * k + l] + gr[l] / denom - xr[l] * coupling;
                    }
                }
            }
        }
    }
}

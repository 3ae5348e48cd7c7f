//! Differentiable primitives on [`Var`].

use std::sync::Arc;

use super::kernels::{self, Gemm};
use super::{numel, Element, Tensor, Var};
use crate::error::{Error, Result};
use crate::flops;

fn unary<T: Element>(x: &Var<T>, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
    let out = x.value().map(&f);
    let xv = x.value().clone();
    let yv = out.clone();
    Var::record(out, &[x], move |g, _| {
        let data = g
            .data()
            .iter()
            .zip(xv.data().iter().zip(yv.data()))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        vec![Some(Tensor::raw(g.shape().to_vec(), data))]
    })
}

fn sum_leading<T: Element>(g: &Tensor<T>, tail: &[usize]) -> Tensor<T> {
    let inner = numel(tail);
    let mut acc = vec![T::zero(); inner];
    for chunk in g.data().chunks(inner) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a = *a + v;
        }
    }
    Tensor::raw(tail.to_vec(), acc)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    /// Zero padding as (rows, cols).
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            padding: (padding, padding),
            groups,
        }
    }

    pub fn output_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.padding.0;
        let wp = w + 2 * self.padding.1;
        if hp < kh || wp < kw || self.stride == 0 {
            return None;
        }
        Some(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }
}

impl<T: Element> Var<T> {
    // ---- elementwise -------------------------------------------------------

    fn zip_same(&self, other: &Var<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape(), other.shape()));
        }
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::raw(self.shape().to_vec(), data))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(Var::record(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(Var::record(out, &[self, other], |g, needs| {
            vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = self.zip_same(other, "mul", |a, b| a * b)?;
        let (a, b) = (self.value().clone(), other.value().clone());
        Ok(Var::record(out, &[self, other], move |g, needs| {
            let prod = |t: &Tensor<T>| {
                Tensor::raw(
                    g.shape().to_vec(),
                    g.data().iter().zip(t.data()).map(|(&x, &y)| x * y).collect(),
                )
            };
            vec![needs[0].then(|| prod(&b)), needs[1].then(|| prod(&a))]
        }))
    }

    /// `self + other` where `other`'s shape is a suffix of `self`'s shape.
    pub fn add_bcast(&self, other: &Var<T>) -> Result<Var<T>> {
        let (s, o) = (self.shape(), other.shape());
        if o.len() > s.len() || s[s.len() - o.len()..] != *o {
            return Err(Error::dim("add_bcast", s, o));
        }
        let inner = other.value().numel();
        let od = other.value().data();
        let mut data = self.value().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (a, &b) in chunk.iter_mut().zip(od) {
                *a = *a + b;
            }
        }
        let tail = o.to_vec();
        Ok(Var::record(
            Tensor::raw(s.to_vec(), data),
            &[self, other],
            move |g, needs| vec![Some(g.clone()), needs[1].then(|| sum_leading(g, &tail))],
        ))
    }

    /// `self * other` where `other`'s shape is a prefix of `self`'s shape; each
    /// scalar of `other` scales one trailing block.
    pub fn mul_bcast_prefix(&self, other: &Var<T>) -> Result<Var<T>> {
        let (s, o) = (self.shape(), other.shape());
        if o.len() > s.len() || s[..o.len()] != *o {
            return Err(Error::dim("mul_bcast_prefix", s, o));
        }
        let block: usize = s[o.len()..].iter().product();
        let od = other.value().data();
        let mut data = self.value().to_vec();
        for (chunk, &f) in data.chunks_mut(block).zip(od) {
            for a in chunk {
                *a = *a * f;
            }
        }
        let (xv, sv) = (self.value().clone(), other.value().clone());
        Ok(Var::record(
            Tensor::raw(s.to_vec(), data),
            &[self, other],
            move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut d = g.to_vec();
                    for (chunk, &f) in d.chunks_mut(block).zip(sv.data()) {
                        for a in chunk {
                            *a = *a * f;
                        }
                    }
                    Tensor::raw(g.shape().to_vec(), d)
                });
                let gs = needs[1].then(|| {
                    let d = g
                        .data()
                        .chunks(block)
                        .zip(xv.data().chunks(block))
                        .map(|(gc, xc)| {
                            let mut acc = T::zero();
                            for (&a, &b) in gc.iter().zip(xc) {
                                acc = acc + a * b;
                            }
                            acc
                        })
                        .collect();
                    Tensor::raw(sv.shape().to_vec(), d)
                });
                vec![gx, gs]
            },
        ))
    }

    pub fn scale(&self, c: T) -> Var<T> {
        let out = self.value().map(|v| v * c);
        Var::record(out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn exp(&self) -> Var<T> {
        unary(self, |v| v.exp(), |_, y| y)
    }

    pub fn relu(&self) -> Var<T> {
        unary(
            self,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        unary(self, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(&self) -> Var<T> {
        unary(
            self,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// Exact GELU, `x·Φ(x)` with Φ the standard normal CDF via erf.
    pub fn gelu(&self) -> Var<T> {
        unary(self, gelu, |x, _| {
            let half = T::c(0.5);
            let cdf = half * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-(x * x) * half).exp() * T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            cdf + x * pdf
        })
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&self) -> Var<T> {
        unary(self, softplus, |x, _| sigmoid(x))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self) -> Var<T> {
        let mut acc = T::zero();
        for &v in self.value().data() {
            acc = acc + v;
        }
        let shape = self.shape().to_vec();
        Var::record(Tensor::scalar(acc), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::c(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let out = self.value().reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(Var::record(out, &[self], move |g, _| {
            vec![Some(g.reshape(&orig).expect("reshape backward"))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let (shape, data) = kernels::permute(self.value().data(), self.shape(), perm);
        let inv = kernels::inverse_perm(perm);
        Ok(Var::record(Tensor::raw(shape, data), &[self], move |g, _| {
            let (s, d) = kernels::permute(g.data(), g.shape(), &inv);
            vec![Some(Tensor::raw(s, d))]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::Shape("transpose_last needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let out = self.value().narrow(axis, start, len)?;
        let shape = self.shape().to_vec();
        Ok(Var::record(out, &[self], move |g, _| {
            let (outer, ext, inner) = split_axis(&shape, axis);
            let mut d = vec![T::zero(); numel(&shape)];
            for o in 0..outer {
                let dst = (o * ext + start) * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(Tensor::raw(shape.clone(), d))]
        }))
    }

    /// Splits along `axis` into pieces of the given extents.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<T>>> {
        if axis >= self.shape().len() || sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::Shape(format!(
                "split {sizes:?} along axis {axis} of {:?}",
                self.shape()
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = self.narrow(axis, start, len);
                start += len;
                v
            })
            .collect()
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value().clone()).collect();
        let out = Tensor::concat(&values, axis)?;
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let refs: Vec<&Var<T>> = parts.iter().collect();
        Ok(Var::record(out, &refs, move |g, needs| {
            let mut start = 0;
            extents
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let piece = need.then(|| g.narrow(axis, start, len).expect("concat backward"));
                    start += len;
                    piece
                })
                .collect()
        }))
    }

    /// `[B, ...] -> [B·n, ...]` with row `b·n + i` a copy of row `b`.
    pub fn repeat_batch(&self, n: usize) -> Result<Var<T>> {
        if n == 0 || self.shape().is_empty() {
            return Err(Error::Shape("repeat_batch needs n >= 1 and rank >= 1".into()));
        }
        let b = self.shape()[0];
        let row = self.value().numel() / b;
        let src = self.value().data();
        let mut data = Vec::with_capacity(src.len() * n);
        for r in src.chunks(row) {
            for _ in 0..n {
                data.extend_from_slice(r);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = b * n;
        let orig = self.shape().to_vec();
        Ok(Var::record(Tensor::raw(shape, data), &[self], move |g, _| {
            let mut d = vec![T::zero(); b * row];
            for (bi, dst) in d.chunks_mut(row).enumerate() {
                for i in 0..n {
                    let src = &g.data()[(bi * n + i) * row..(bi * n + i + 1) * row];
                    for (a, &v) in dst.iter_mut().zip(src) {
                        *a = *a + v;
                    }
                }
            }
            vec![Some(Tensor::raw(orig.clone(), d))]
        }))
    }

    /// Row gather: `out[i] = self[index[i]]` for a `[R, F]` table.
    pub fn gather_rows(&self, index: Arc<Vec<usize>>) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows needs a [R, F] table, got {s:?}")));
        }
        let (rows, f) = (s[0], s[1]);
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("gather index {bad} out of range {rows}")));
        }
        let src = self.value().data();
        let mut data = Vec::with_capacity(index.len() * f);
        for &i in index.iter() {
            data.extend_from_slice(&src[i * f..(i + 1) * f]);
        }
        let shape = vec![index.len(), f];
        Ok(Var::record(Tensor::raw(shape, data), &[self], move |g, _| {
            let mut d = vec![T::zero(); rows * f];
            for (k, &i) in index.iter().enumerate() {
                for j in 0..f {
                    d[i * f + j] = d[i * f + j] + g.data()[k * f + j];
                }
            }
            vec![Some(Tensor::raw(vec![rows, f], d))]
        }))
    }

    // ---- linear algebra ----------------------------------------------------

    fn matmul_impl(&self, other: &Var<T>, transpose_rhs: bool) -> Result<Var<T>> {
        let op = if transpose_rhs { "matmul_t" } else { "matmul" };
        let (a, b) = (self.shape(), other.shape());
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim(op, a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = if transpose_rhs {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let shared = b_batch.is_empty();
        if k != kb || !(shared || a_batch == b_batch) {
            return Err(Error::dim(op, a, b));
        }
        let batch: usize = a_batch.iter().product();
        flops::add(batch * m * k * n);
        let mode = if transpose_rhs { Gemm::NT } else { Gemm::NN };
        let out = kernels::bmm(mode, self.value().data(), other.value().data(), batch, m, k, n, shared);
        let mut shape = a_batch.to_vec();
        shape.extend([m, n]);
        let (av, bv) = (self.value().clone(), other.value().clone());
        Ok(Var::record(Tensor::raw(shape, out), &[self, other], move |g, needs| {
            let gd = g.data();
            // dA = G·Bᵀ (or G·B when B was transposed)
            let ga = needs[0].then(|| {
                let mode = if transpose_rhs { Gemm::NN } else { Gemm::NT };
                let d = kernels::bmm(mode, gd, bv.data(), batch, m, n, k, shared);
                Tensor::raw(av.shape().to_vec(), d)
            });
            // dB = Aᵀ·G (or Gᵀ·A when B was transposed), summed over batch if shared
            let gb = needs[1].then(|| {
                let per: Vec<T> = if transpose_rhs {
                    kernels::bmm(Gemm::TN, gd, av.data(), batch, n, m, k, false)
                } else {
                    kernels::bmm(Gemm::TN, av.data(), gd, batch, k, m, n, false)
                };
                let d = if shared {
                    let mut acc = vec![T::zero(); k * n];
                    for chunk in per.chunks(k * n) {
                        for (a, &v) in acc.iter_mut().zip(chunk) {
                            *a = *a + v;
                        }
                    }
                    acc
                } else {
                    per
                };
                Tensor::raw(bv.shape().to_vec(), d)
            });
            vec![ga, gb]
        }))
    }

    /// Batched matrix product over the last two axes. Leading axes must match,
    /// or `other` may be a plain matrix shared by every batch slice.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_t(&self, other: &Var<T>) -> Result<Var<T>> {
        self.matmul_impl(other, true)
    }

    /// Affine map over the last axis: `x·Wᵀ + b` with `W: [out, in]`.
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let s = self.shape();
        let w = weight.shape();
        if s.is_empty() || w.len() != 2 || s[s.len() - 1] != w[1] {
            return Err(Error::dim("linear", s, w));
        }
        if let Some(b) = bias {
            if b.shape() != [w[0]] {
                return Err(Error::dim("linear bias", b.shape(), &w[..1]));
            }
        }
        let (out_f, in_f) = (w[0], w[1]);
        let rows = self.value().numel() / in_f;
        flops::add(rows * in_f * out_f);
        let mut data = kernels::gemm(Gemm::NT, self.value().data(), weight.value().data(), rows, in_f, out_f);
        if let Some(b) = bias {
            for row in data.chunks_mut(out_f) {
                for (o, &bv) in row.iter_mut().zip(b.value().data()) {
                    *o = *o + bv;
                }
            }
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = out_f;
        let (xv, wv) = (self.value().clone(), weight.value().clone());
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(Var::record(Tensor::raw(shape, data), &inputs, move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                Tensor::raw(
                    xv.shape().to_vec(),
                    kernels::gemm(Gemm::NN, gd, wv.data(), rows, out_f, in_f),
                )
            });
            let gw = needs[1].then(|| {
                Tensor::raw(
                    vec![out_f, in_f],
                    kernels::gemm(Gemm::TN, gd, xv.data(), out_f, rows, in_f),
                )
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| sum_leading(g, &[out_f])));
            }
            grads
        }))
    }

    // ---- normalization -----------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        if axis >= self.shape().len() {
            return Err(Error::Shape(format!("softmax axis {axis} for {:?}", self.shape())));
        }
        if self.value().data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let y = Tensor::raw(
            self.shape().to_vec(),
            kernels::softmax(self.value().data(), outer, len, inner),
        );
        let yv = y.clone();
        Ok(Var::record(y, &[self], move |g, _| {
            let d = kernels::softmax_backward(yv.data(), g.data(), outer, len, inner);
            vec![Some(Tensor::raw(g.shape().to_vec(), d))]
        }))
    }

    /// Layer norm over the last axis with population variance, then affine.
    pub fn layernorm(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let s = self.shape();
        let c = *s.last().ok_or_else(|| Error::Shape("layernorm on a scalar".into()))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim("layernorm affine", gamma.shape(), &[c]));
        }
        if eps <= T::zero() {
            return Err(Error::Config("layernorm eps must be positive".into()));
        }
        let (out, xhat, rstd) =
            kernels::layernorm(self.value().data(), c, gamma.value().data(), beta.value().data(), eps);
        let gv = gamma.value().clone();
        let shape = s.to_vec();
        Ok(Var::record(
            Tensor::raw(shape.clone(), out),
            &[self, gamma, beta],
            move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let cn = T::c(c as f64);
                    let mut d = vec![T::zero(); gd.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in row.clone() {
                            let gh = gd[j] * gv.data()[j - r * c];
                            mean_g = mean_g + gh;
                            mean_gx = mean_gx + gh * xhat[j];
                        }
                        mean_g = mean_g / cn;
                        mean_gx = mean_gx / cn;
                        for j in row {
                            let gh = gd[j] * gv.data()[j - r * c];
                            d[j] = rs * (gh - mean_g - xhat[j] * mean_gx);
                        }
                    }
                    Tensor::raw(shape.clone(), d)
                });
                let gg = needs[1].then(|| {
                    let mut d = vec![T::zero(); c];
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] = d[j] + gr[j] * hr[j];
                        }
                    }
                    Tensor::raw(vec![c], d)
                });
                let gb = needs[2].then(|| sum_leading(g, &[c]));
                vec![gx, gg, gb]
            },
        ))
    }

    // ---- convolution and pooling -------------------------------------------

    /// Cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, spec: ConvSpec) -> Result<Var<T>> {
        let (x, w) = (self.shape(), weight.shape());
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::dim("conv2d", x, w));
        }
        let (n, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d channels {cin}->{cout} not divisible by groups {groups}"
            )));
        }
        if cin / groups != cin_g {
            return Err(Error::dim("conv2d", x, w));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::dim("conv2d bias", b.shape(), &[cout]));
            }
        }
        let (ho, wo) = spec
            .output_extent(h, wd, kh, kw)
            .ok_or_else(|| Error::Config(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}")))?;
        let cout_g = cout / groups;
        let kk = cin_g * kh * kw;
        let plane = ho * wo;
        flops::add(n * cout * plane * kk);

        let xd = self.value().data();
        let wdata = weight.value().data();
        let geo = Geo {
            cin_g,
            h,
            w: wd,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            ho,
            wo,
        };
        let bias_data = bias.map(|b| b.value().data());
        let mut out = vec![T::zero(); n * cout * plane];
        {
            use rayon::prelude::*;
            out.par_chunks_mut(cout_g * plane).enumerate().for_each(|(idx, o)| {
                let (ni, gi) = (idx / groups, idx % groups);
                let xs = &xd[(ni * cin + gi * cin_g) * h * wd..(ni * cin + (gi + 1) * cin_g) * h * wd];
                let cols = geo.im2col(xs);
                let wg = &wdata[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                kernels::gemm_into(Gemm::NN, wg, &cols, cout_g, kk, plane, o);
                if let Some(bd) = bias_data {
                    for (co, row) in o.chunks_mut(plane).enumerate() {
                        let bv = bd[gi * cout_g + co];
                        for v in row {
                            *v = *v + bv;
                        }
                    }
                }
            });
        }
        let (xv, wv) = (self.value().clone(), weight.value().clone());
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(Var::record(
            Tensor::raw(vec![n, cout, ho, wo], out),
            &inputs,
            move |g, needs| {
                use rayon::prelude::*;
                let gd = g.data();
                let xd = xv.data();
                let wdata = wv.data();
                let gx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); n * cin * h * wd];
                    dx.par_chunks_mut(cin_g * h * wd).enumerate().for_each(|(idx, dxs)| {
                        let (ni, gi) = (idx / groups, idx % groups);
                        let wg = &wdata[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                        let gslice = &gd[(ni * cout + gi * cout_g) * plane..(ni * cout + (gi + 1) * cout_g) * plane];
                        let dcols = kernels::gemm(Gemm::TN, wg, gslice, kk, cout_g, plane);
                        geo.col2im(&dcols, dxs);
                    });
                    Tensor::raw(xv.shape().to_vec(), dx)
                });
                let gw = needs[1].then(|| {
                    let partials: Vec<Vec<T>> = (0..n * groups)
                        .into_par_iter()
                        .map(|idx| {
                            let (ni, gi) = (idx / groups, idx % groups);
                            let xs = &xd[(ni * cin + gi * cin_g) * h * wd..(ni * cin + (gi + 1) * cin_g) * h * wd];
                            let cols = geo.im2col(xs);
                            let gslice =
                                &gd[(ni * cout + gi * cout_g) * plane..(ni * cout + (gi + 1) * cout_g) * plane];
                            kernels::gemm(Gemm::NT, gslice, &cols, cout_g, plane, kk)
                        })
                        .collect();
                    let mut dw = vec![T::zero(); cout * kk];
                    for (idx, p) in partials.iter().enumerate() {
                        let gi = idx % groups;
                        let dst = &mut dw[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                        for (a, &v) in dst.iter_mut().zip(p) {
                            *a = *a + v;
                        }
                    }
                    Tensor::raw(wv.shape().to_vec(), dw)
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut db = vec![T::zero(); cout];
                        for ni in 0..n {
                            for (co, acc) in db.iter_mut().enumerate() {
                                for &v in &gd[(ni * cout + co) * plane..(ni * cout + co + 1) * plane] {
                                    *acc = *acc + v;
                                }
                            }
                        }
                        Tensor::raw(vec![cout], db)
                    }));
                }
                grads
            },
        ))
    }

    /// Max pooling over `[N, C, H, W]` with implicit `-inf` padding.
    pub fn maxpool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("maxpool2d needs [N,C,H,W], got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if kernel == 0 || stride == 0 || padding >= kernel || h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(Error::Config(format!(
                "maxpool2d kernel {kernel} stride {stride} padding {padding} on {h}x{w}"
            )));
        }
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        let xd = self.value().data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if at == usize::MAX || xd[i] > best {
                                best = xd[i];
                                at = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        let total = self.value().numel();
        let shape = s.to_vec();
        Ok(Var::record(
            Tensor::raw(vec![n, c, ho, wo], out),
            &[self],
            move |g, _| {
                let mut d = vec![T::zero(); total];
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    d[i] = d[i] + gv;
                }
                vec![Some(Tensor::raw(shape.clone(), d))]
            },
        ))
    }

    /// Spatial mean of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&self) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool needs [N,C,H,W], got {s:?}")));
        }
        let plane = s[2] * s[3];
        let inv = T::one() / T::c(plane as f64);
        let data = self
            .value()
            .data()
            .chunks(plane)
            .map(|p| {
                let mut acc = T::zero();
                for &v in p {
                    acc = acc + v;
                }
                acc * inv
            })
            .collect();
        let shape = s.to_vec();
        Ok(Var::record(
            Tensor::raw(vec![s[0], s[1]], data),
            &[self],
            move |g, _| {
                let mut d = Vec::with_capacity(numel(&shape));
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, plane));
                }
                vec![Some(Tensor::raw(shape.clone(), d))]
            },
        ))
    }

    // ---- losses ------------------------------------------------------------

    /// Mean cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
        }
        let probs = kernels::softmax(self.value().data(), b, k, 1);
        let mut loss = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            loss = loss - probs[r * k + l].max(T::min_positive_value()).ln();
        }
        let bn = T::c(b as f64);
        loss = loss / bn;
        let labels = labels.to_vec();
        Ok(Var::record(Tensor::scalar(loss), &[self], move |g, _| {
            let scale = g.item() / bn;
            let mut d = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                d[r * k + l] = d[r * k + l] - T::one();
            }
            for v in d.iter_mut() {
                *v = *v * scale;
            }
            vec![Some(Tensor::raw(vec![b, k], d))]
        }))
    }
}

#[derive(Clone, Copy)]
struct Geo {
    cin_g: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: (usize, usize),
    ho: usize,
    wo: usize,
}

impl Geo {
    fn im2col<T: Element>(&self, x: &[T]) -> Vec<T> {
        kernels::im2col(
            x,
            self.cin_g,
            self.h,
            self.w,
            self.kh,
            self.kw,
            self.stride,
            self.pad,
            self.ho,
            self.wo,
        )
    }

    fn col2im<T: Element>(&self, cols: &[T], dx: &mut [T]) {
        kernels::col2im(
            cols,
            self.cin_g,
            self.h,
            self.w,
            self.kh,
            self.kw,
            self.stride,
            self.pad,
            self.ho,
            self.wo,
            dx,
        )
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Element>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn gelu<T: Element>(x: T) -> T {
    T::c(0.5) * x * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

//! Slice-level compute kernels. Every reduction accumulates sequentially in
//! index order, and parallel splits only ever partition independent output
//! rows, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use super::Element;

/// Below this many multiply-adds a GEMM runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Gemm {
    /// `a[m,k] · b[k,n]`
    NN,
    /// `a[m,k] · b[n,k]ᵀ`
    NT,
    /// `a[k,m]ᵀ · b[k,n]`
    TN,
}

fn gemm_row<T: Element>(mode: Gemm, a: &[T], b: &[T], i: usize, k: usize, n: usize, row: &mut [T]) {
    match mode {
        Gemm::NN => {
            row.fill(T::zero());
            let arow = &a[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        Gemm::NT => {
            let arow = &a[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc = acc + x * y;
                }
                *o = acc;
            }
        }
        Gemm::TN => unreachable!("TN is lowered to NN"),
    }
}

/// Single matrix product into `out[m,n]`.
pub(crate) fn gemm_into<T: Element>(mode: Gemm, a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), m * n);
    if mode == Gemm::TN {
        let at = transpose2(a, k, m);
        return gemm_into(Gemm::NN, &at, b, m, k, n, out);
    }
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| gemm_row(mode, a, b, i, k, n, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            gemm_row(mode, a, b, i, k, n, row);
        }
    }
}

pub(crate) fn gemm<T: Element>(mode: Gemm, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_into(mode, a, b, m, k, n, &mut out);
    out
}

/// Batched product. `a` holds `batch` matrices; `b` holds `batch` matrices or
/// one shared matrix when `b_shared`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm<T: Element>(
    mode: Gemm,
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) -> Vec<T> {
    let (a_sz, b_sz) = match mode {
        Gemm::NN => (m * k, k * n),
        Gemm::NT => (m * k, n * k),
        Gemm::TN => (k * m, k * n),
    };
    let mut out = vec![T::zero(); batch * m * n];
    let run = |(bi, o): (usize, &mut [T])| {
        let bs = if b_shared {
            &b[..b_sz]
        } else {
            &b[bi * b_sz..(bi + 1) * b_sz]
        };
        gemm_into(mode, &a[bi * a_sz..(bi + 1) * a_sz], bs, m, k, n, o);
    };
    if batch > 1 && batch * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(m * n).enumerate().for_each(run);
    } else {
        out.chunks_mut(m * n).enumerate().for_each(run);
    }
    out
}

pub(crate) fn transpose2<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output element `o` takes input dimension `perm[o]`.
pub(crate) fn permute<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let rank = out_shape.len();
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let last = rank - 1;
    let last_ext = out_shape[last];
    let last_stride = src_strides[last];
    while out.len() < total {
        for j in 0..last_ext {
            out.push(data[src + j * last_stride]);
        }
        // advance all but the innermost index
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Softmax along an axis described as `outer × len × inner`.
pub(crate) fn softmax<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Element>(y: &[T], dy: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot = dot + dy[at(j)] * y[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// Layer norm over rows of width `c`. Returns output, normalized values and
/// reciprocal standard deviations.
pub(crate) fn layernorm<T: Element>(x: &[T], c: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let cn = T::c(c as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / cn;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / cn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gamma[j] + beta[j];
        }
    }
    (out, xhat, rstd)
}

/// im2col for one image slice `x[cin, h, w]`; columns laid out `[cin·kh·kw, ho·wo]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Element>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: (usize, usize),
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); cin * kh * kw * ho * wo];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of columns back into an image slice (adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Element>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: (usize, usize),
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            let at = (c * h + iy as usize) * w + ix as usize;
                            dx[at] = dx[at] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

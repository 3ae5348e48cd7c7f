//! MambaVision mixer: zero-order-hold discretization, the selective scan, the
//! equivalent convolution kernel for time-invariant parameters, the two-branch
//! mixer and the hybrid mixer/self-attention stage layout.

use std::fmt;

use rayon::prelude::*;

use crate::attention::{AttentionKind, WindowAttention};
use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::nn::{linear_count, mlp_count, module_fields, Conv2d, Ctx, LayerNorm, Linear, Mlp, Param, ParamInit};
use crate::tensor::{ConvSpec, Element, Tensor, Var};

pub const DEFAULT_STATE: usize = 16;
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 0.1;

/// Zero-order hold for diagonal `A`: `Ā = exp(ΔA)`, `B̄ = (exp(ΔA) − 1)/A · B`.
pub fn discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::Domain(format!(
            "discretization step must be positive, got {delta}"
        )));
    }
    if a.len() != b.len() {
        return Err(Error::dim("discretize", &[a.len()], &[b.len()]));
    }
    let a_bar = a.iter().map(|&a| (delta * a).exp()).collect();
    let b_bar = a.iter().zip(b).map(|(&a, &b)| zoh_input_gain(a, delta) * b).collect();
    Ok((a_bar, b_bar))
}

/// `(exp(δa) − 1)/a`, with the `a → 0` limit `δ`.
fn zoh_input_gain<T: Element>(a: T, delta: T) -> T {
    if a == T::zero() {
        delta
    } else {
        (delta * a).exp_m1() / a
    }
}

/// Shapes of one scan problem.
#[derive(Clone, Copy)]
struct ScanDims {
    batch: usize,
    channels: usize,
    state: usize,
    len: usize,
}

/// Runs one (batch, channel) lane; fills `y` and, when given, the states
/// `h_t` for every step (`len × state`, row-major).
#[allow(clippy::too_many_arguments)]
fn scan_lane<T: Element>(
    dims: ScanDims,
    b: usize,
    d: usize,
    u: &[T],
    delta: &[T],
    a: &[T],
    bm: &[T],
    cm: &[T],
    skip: T,
    y: &mut [T],
    mut states: Option<&mut [T]>,
) {
    let ScanDims { state: m, len: l, .. } = dims;
    let lane = &u[..l];
    let mut h = vec![T::zero(); m];
    for t in 0..l {
        let dt = delta[t];
        let mut acc = T::zero();
        for s in 0..m {
            let av = a[d * m + s];
            let bt = bm[(b * m + s) * l + t];
            let ct = cm[(b * m + s) * l + t];
            h[s] = (dt * av).exp() * h[s] + zoh_input_gain(av, dt) * bt * lane[t];
            acc = acc + ct * h[s];
        }
        y[t] = acc + skip * lane[t];
        if let Some(st) = states.as_deref_mut() {
            st[t * m..(t + 1) * m].copy_from_slice(&h);
        }
    }
}

/// Selective scan over `u: [B, D, L]` with per-token step `delta: [B, D, L]`
/// (already positive), `a: [D, M]` (negative), per-token `b, c: [B, M, L]`
/// and skip `d: [D]`:
///
/// `h_t = exp(δ_t A)·h_{t−1} + (exp(δ_t A) − 1)/A · B_t·u_t`, `y_t = C_t·h_t + D·u_t`, `h_0 = 0`.
pub fn selective_scan<T: Element>(
    u: &Var<T>,
    delta: &Var<T>,
    a: &Var<T>,
    b: &Var<T>,
    c: &Var<T>,
    d: &Var<T>,
) -> Result<Var<T>> {
    let us = u.shape();
    if us.len() != 3 {
        return Err(Error::Shape(format!(
            "selective_scan input must be [B, D, L], got {us:?}"
        )));
    }
    let (batch, channels, len) = (us[0], us[1], us[2]);
    if delta.shape() != us {
        return Err(Error::dim("selective_scan delta", delta.shape(), us));
    }
    if a.shape().len() != 2 || a.shape()[0] != channels {
        return Err(Error::dim("selective_scan A", a.shape(), &[channels, 0]));
    }
    let state = a.shape()[1];
    let bc = [batch, state, len];
    if b.shape() != bc {
        return Err(Error::dim("selective_scan B", b.shape(), &bc));
    }
    if c.shape() != bc {
        return Err(Error::dim("selective_scan C", c.shape(), &bc));
    }
    if d.shape() != [channels] {
        return Err(Error::dim("selective_scan D", d.shape(), &[channels]));
    }
    if !delta.value().all_finite() {
        return Err(Error::Numeric("non-finite discretization step".into()));
    }
    let dims = ScanDims {
        batch,
        channels,
        state,
        len,
    };
    let (uv, dv, av, bv, cv, sv) = (
        u.value().clone(),
        delta.value().clone(),
        a.value().clone(),
        b.value().clone(),
        c.value().clone(),
        d.value().clone(),
    );
    let mut y = vec![T::zero(); batch * channels * len];
    y.par_chunks_mut(len).enumerate().for_each(|(lane, out)| {
        let (bi, di) = (lane / channels, lane % channels);
        let off = lane * len;
        scan_lane(
            dims,
            bi,
            di,
            &uv.data()[off..off + len],
            &dv.data()[off..off + len],
            av.data(),
            bv.data(),
            cv.data(),
            sv.data()[di],
            out,
            None,
        );
    });
    let out = Tensor::raw(us.to_vec(), y);
    Ok(Var::record(out, &[u, delta, a, b, c, d], move |g, needs| {
        let grads = scan_backward(dims, &uv, &dv, &av, &bv, &cv, &sv, g);
        grads.into_iter().zip(needs).map(|(g, &n)| n.then_some(g)).collect()
    }))
}

/// Gradients of the scan for `(u, delta, a, b, c, d)`. Lanes are visited in
/// index order so every accumulation has a fixed order.
#[allow(clippy::too_many_arguments)]
fn scan_backward<T: Element>(
    dims: ScanDims,
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    bm: &Tensor<T>,
    cm: &Tensor<T>,
    skip: &Tensor<T>,
    gy: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let ScanDims {
        batch,
        channels,
        state: m,
        len: l,
    } = dims;
    let zero = T::zero();
    let mut du = vec![zero; u.numel()];
    let mut ddelta = vec![zero; u.numel()];
    let mut da = vec![zero; a.numel()];
    let mut db = vec![zero; bm.numel()];
    let mut dc = vec![zero; cm.numel()];
    let mut dd = vec![zero; skip.numel()];
    let (av, bv, cv) = (a.data(), bm.data(), cm.data());
    let mut states = vec![zero; l * m];
    let mut y = vec![zero; l];
    let mut gh = vec![zero; m];
    for bi in 0..batch {
        for di in 0..channels {
            let off = (bi * channels + di) * l;
            let uu = &u.data()[off..off + l];
            let dt = &delta.data()[off..off + l];
            let g = &gy.data()[off..off + l];
            scan_lane(
                dims,
                bi,
                di,
                uu,
                dt,
                av,
                bv,
                cv,
                skip.data()[di],
                &mut y,
                Some(&mut states),
            );
            gh.iter_mut().for_each(|v| *v = zero);
            for t in (0..l).rev() {
                let mut du_t = g[t] * skip.data()[di];
                let mut ddt = zero;
                dd[di] = dd[di] + g[t] * uu[t];
                for s in 0..m {
                    let aval = av[di * m + s];
                    let bidx = (bi * m + s) * l + t;
                    let h_t = states[t * m + s];
                    let h_prev = if t > 0 { states[(t - 1) * m + s] } else { zero };
                    // Carry from step t+1 was folded into gh[s] on the previous iteration.
                    gh[s] = gh[s] + g[t] * cv[bidx];
                    dc[bidx] = dc[bidx] + g[t] * h_t;
                    let decay = (dt[t] * aval).exp();
                    let gain = zoh_input_gain(aval, dt[t]);
                    du_t = du_t + gh[s] * gain * bv[bidx];
                    db[bidx] = db[bidx] + gh[s] * gain * uu[t];
                    let g_decay = gh[s] * h_prev;
                    let g_gain = gh[s] * bv[bidx] * uu[t];
                    ddt = ddt + g_decay * aval * decay + g_gain * decay;
                    let dgain_da = if aval == zero {
                        dt[t] * dt[t] / T::c(2.0)
                    } else {
                        dt[t] * decay / aval - (decay - T::one()) / (aval * aval)
                    };
                    da[di * m + s] = da[di * m + s] + g_decay * dt[t] * decay + g_gain * dgain_da;
                    gh[s] = gh[s] * decay;
                }
                du[off + t] = du_t;
                ddelta[off + t] = ddt;
            }
        }
    }
    vec![
        Tensor::raw(u.shape().to_vec(), du),
        Tensor::raw(delta.shape().to_vec(), ddelta),
        Tensor::raw(a.shape().to_vec(), da),
        Tensor::raw(bm.shape().to_vec(), db),
        Tensor::raw(cm.shape().to_vec(), dc),
        Tensor::raw(skip.shape().to_vec(), dd),
    ]
}

/// One scalar SSM lane with continuous parameters given per timestep.
#[derive(Debug, Clone)]
pub struct SsmLane {
    /// Diagonal `A` (`M` entries, negative).
    pub a: Vec<f64>,
    /// Step per timestep.
    pub delta: Vec<f64>,
    /// `B_t` per timestep (`T × M`).
    pub b: Vec<Vec<f64>>,
    /// `C_t` per timestep (`T × M`).
    pub c: Vec<Vec<f64>>,
    pub d: f64,
}

impl SsmLane {
    /// Time-invariant lane of length `len`.
    pub fn frozen(a: Vec<f64>, delta: f64, b: Vec<f64>, c: Vec<f64>, d: f64, len: usize) -> Self {
        SsmLane {
            a,
            delta: vec![delta; len],
            b: vec![b; len],
            c: vec![c; len],
            d,
        }
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    /// Direct recurrence.
    pub fn scan(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.len() {
            return Err(Error::dim("ssm lane", &[x.len()], &[self.len()]));
        }
        let mut h = vec![0.0; self.a.len()];
        let mut y = Vec::with_capacity(x.len());
        for (t, &xt) in x.iter().enumerate() {
            let (a_bar, b_bar) = discretize(&self.a, &self.b[t], self.delta[t])?;
            let mut acc = 0.0;
            for s in 0..h.len() {
                h[s] = a_bar[s] * h[s] + b_bar[s] * xt;
                acc += self.c[t][s] * h[s];
            }
            y.push(acc + self.d * xt);
        }
        Ok(y)
    }

    fn time_invariant(&self) -> bool {
        self.delta.windows(2).all(|w| w[0] == w[1])
            && self.b.windows(2).all(|w| w[0] == w[1])
            && self.c.windows(2).all(|w| w[0] == w[1])
    }

    /// Convolution kernel `K̄` of the lane; requires time-invariant parameters.
    pub fn conv_kernel(&self) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if !self.time_invariant() {
            return Err(Error::Unsupported(
                "convolution kernel needs time-invariant step, B and C".into(),
            ));
        }
        let (a_bar, b_bar) = discretize(&self.a, &self.b[0], self.delta[0])?;
        Ok(ssm_conv_kernel(&a_bar, &b_bar, &self.c[0], self.len()))
    }
}

/// `K̄ = (C·B̄, C·ĀB̄, …, C·Ā^{T−1}B̄)` for diagonal discrete `Ā`.
pub fn ssm_conv_kernel(a_bar: &[f64], b_bar: &[f64], c: &[f64], len: usize) -> Vec<f64> {
    let mut p: Vec<f64> = b_bar.to_vec();
    let mut k = Vec::with_capacity(len);
    for _ in 0..len {
        k.push(c.iter().zip(&p).map(|(c, p)| c * p).sum());
        for (p, a) in p.iter_mut().zip(a_bar) {
            *p *= a;
        }
    }
    k
}

/// `y_t = Σ_{j≤t} k_j · x_{t−j}`
pub fn causal_conv(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            (0..=t.min(kernel.len().saturating_sub(1)))
                .map(|j| kernel[j] * x[t - j])
                .sum()
        })
        .collect()
}

/// Two-branch mixer on `[B, T, C]`: a selective-scan branch and a symmetric
/// conv + SiLU branch, each `C/2` wide, concatenated and projected to `C`.
#[derive(Clone, Debug)]
pub struct MambaMixer<T> {
    pub in_proj: Linear<T>,
    pub conv_x: Conv2d<T>,
    pub conv_z: Conv2d<T>,
    pub x_proj: Linear<T>,
    pub dt_proj: Linear<T>,
    /// `A = −exp(A_log)`, `[C/2, M]`.
    pub a_log: Param<T>,
    pub d: Param<T>,
    pub out_proj: Linear<T>,
    pub dim: usize,
    pub state: usize,
    pub dt_rank: usize,
}
module_fields!(MambaMixer {
    in_proj,
    conv_x,
    conv_z,
    x_proj,
    dt_proj,
    a_log,
    d,
    out_proj
});

impl<T: Element> MambaMixer<T> {
    pub fn new(p: &mut ParamInit<'_>, dim: usize, state: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("mixer width must be even, got {dim}")));
        }
        if state == 0 {
            return Err(Error::Config("mixer state size must be positive".into()));
        }
        let half = dim / 2;
        let dt_rank = dim.div_ceil(16);
        let conv = ConvSpec {
            stride: 1,
            padding: (0, 1),
            groups: half,
        };
        let in_proj = Linear::new(&mut p.scope("in_proj"), dim, dim, true);
        let mut conv1d = |name: &str| -> Result<Conv2d<T>> {
            let mut s = p.scope(name);
            Ok(Conv2d {
                weight: s.kaiming("weight", &[half, 1, 1, 3], 3),
                bias: Some(s.constant("bias", &[half], 0.0)),
                spec: conv,
            })
        };
        let conv_x = conv1d("conv_x")?;
        let conv_z = conv1d("conv_z")?;
        let x_proj = Linear::new(&mut p.scope("x_proj"), half, dt_rank + 2 * state, true);
        let dt_proj = {
            let mut s = p.scope("dt_proj");
            let bound = (dt_rank as f64).powf(-0.5);
            let w = s.rng().uniform(&[half, dt_rank], -bound, bound);
            let dt = s.rng().uniform::<f64>(&[half], 0.0, 1.0);
            // Inverse softplus of a log-uniform step in [DT_MIN, DT_MAX].
            let bias = dt.map(|r| {
                let v = (r * (DT_MAX.ln() - DT_MIN.ln()) + DT_MIN.ln()).exp();
                v + (-(-v).exp_m1()).ln()
            });
            Linear {
                weight: s.tensor("weight", w),
                bias: Some(s.tensor("bias", bias.cast())),
            }
        };
        let a_log = Tensor::from_f64(
            &[half, state],
            &(0..half * state)
                .map(|i| ((i % state + 1) as f64).ln())
                .collect::<Vec<_>>(),
        )?;
        Ok(MambaMixer {
            in_proj,
            conv_x,
            conv_z,
            x_proj,
            dt_proj,
            a_log: p.tensor("a_log", a_log),
            d: p.constant("d", &[half], 1.0),
            out_proj: Linear::new(&mut p.scope("out_proj"), dim, dim, true),
            dim,
            state,
            dt_rank,
        })
    }

    /// Depthwise same-padded kernel-3 convolution along time on `[B, C/2, T]`.
    fn conv1d(&self, ctx: &Ctx<T>, conv: &Conv2d<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape().to_vec();
        conv.forward(ctx, &x.reshape(&[s[0], s[1], 1, s[2]])?)?.reshape(&s)
    }

    /// Branch outputs before concatenation, each `[B, C/2, T]`:
    /// (selective-scan branch, symmetric branch).
    pub fn branches(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::Shape(format!("mixer expects [B, T, {}], got {s:?}", self.dim)));
        }
        let (b, t, half) = (s[0], s[1], self.dim / 2);
        let _g = flops::scope(Category::Mixer);
        let xz = self.in_proj.forward(ctx, x)?.permute(&[0, 2, 1])?;
        let parts = xz.split(1, &[half, half])?;
        let xs = self.conv1d(ctx, &self.conv_x, &parts[0])?.silu();
        let zs = self.conv1d(ctx, &self.conv_z, &parts[1])?.silu();

        let x_dbl = self.x_proj.forward(ctx, &xs.permute(&[0, 2, 1])?)?;
        let p = x_dbl.split(2, &[self.dt_rank, self.state, self.state])?;
        let delta = self.dt_proj.forward(ctx, &p[0])?.softplus().permute(&[0, 2, 1])?;
        let bm = p[1].permute(&[0, 2, 1])?;
        let cm = p[2].permute(&[0, 2, 1])?;
        let a = ctx.param(&self.a_log).exp().neg();
        let y = selective_scan(&xs, &delta, &a, &bm, &cm, &ctx.param(&self.d))?;
        debug_assert_eq!(y.shape(), &[b, half, t]);
        Ok((y, zs))
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let (y, z) = self.branches(ctx, x)?;
        let _g = flops::scope(Category::Mixer);
        let cat = Var::concat(&[y, z], 1)?.permute(&[0, 2, 1])?;
        self.out_proj.forward(ctx, &cat)
    }

    pub fn count(dim: usize, state: usize) -> usize {
        let half = dim / 2;
        let rank = dim.div_ceil(16);
        linear_count(dim, dim, true)
            + 2 * (half * 3 + half)
            + linear_count(half, rank + 2 * state, true)
            + linear_count(rank, half, true)
            + half * state
            + half
            + linear_count(dim, dim, true)
    }

    /// MACs counted for `tokens` tokens (projections and convolutions).
    pub fn macs(dim: usize, state: usize, tokens: usize) -> u64 {
        let half = dim / 2;
        let rank = dim.div_ceil(16);
        let per_token = dim * dim + 2 * half * 3 + half * (rank + 2 * state) + rank * half + dim * dim;
        (tokens * per_token) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// MambaVision mixer.
    Mixer,
    /// Multi-head self-attention.
    Attention,
}

/// Per-layer mixer kinds of a hybrid stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridStageLayout {
    pub kinds: Vec<LayerKind>,
}

impl HybridStageLayout {
    /// Mixer layers first, self-attention in the last `⌊N/2⌋` layers.
    pub fn default_pattern(n: usize) -> Self {
        let mixers = n - n / 2;
        HybridStageLayout {
            kinds: (0..n)
                .map(|i| {
                    if i < mixers {
                        LayerKind::Mixer
                    } else {
                        LayerKind::Attention
                    }
                })
                .collect(),
        }
    }
}

impl fmt::Display for HybridStageLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in &self.kinds {
            f.write_str(match k {
                LayerKind::Mixer => "M",
                LayerKind::Attention => "S",
            })?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum TokenMixer<T> {
    Mamba(MambaMixer<T>),
    Attention(WindowAttention<T>),
}

impl<T: Element> crate::nn::Module<T> for TokenMixer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            TokenMixer::Mamba(m) => m.visit(f),
            TokenMixer::Attention(a) => a.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            TokenMixer::Mamba(m) => m.visit_mut(f),
            TokenMixer::Attention(a) => a.visit_mut(f),
        }
    }
}

/// `x + Mixer(LN(x))`, then `x + MLP(LN(x))`, on `[B, T, C]`.
#[derive(Clone, Debug)]
pub struct HybridLayer<T> {
    pub kind: LayerKind,
    pub norm1: LayerNorm<T>,
    pub mixer: TokenMixer<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}
module_fields!(HybridLayer {
    norm1,
    mixer,
    norm2,
    mlp
});

impl<T: Element> HybridLayer<T> {
    pub fn new(
        p: &mut ParamInit<'_>,
        kind: LayerKind,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        state: usize,
    ) -> Result<Self> {
        let norm1 = LayerNorm::new(&mut p.scope("norm1"), dim);
        let mixer = match kind {
            LayerKind::Mixer => TokenMixer::Mamba(MambaMixer::new(&mut p.scope("mixer"), dim, state)?),
            LayerKind::Attention => TokenMixer::Attention(WindowAttention::without_bias(
                &mut p.scope("attn"),
                AttentionKind::Local,
                dim,
                heads,
            )?),
        };
        Ok(HybridLayer {
            kind,
            norm1,
            mixer,
            norm2: LayerNorm::new(&mut p.scope("norm2"), dim),
            mlp: Mlp::new(&mut p.scope("mlp"), dim, mlp_hidden),
        })
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.norm1.forward(ctx, x)?;
        let h = match &self.mixer {
            TokenMixer::Mamba(m) => m.forward(ctx, &h)?,
            TokenMixer::Attention(a) => a.forward_local(ctx, &h)?.output,
        };
        let x = x.add(&h)?;
        let h = self.mlp.forward(ctx, &self.norm2.forward(ctx, &x)?)?;
        x.add(&h)
    }

    pub fn count(kind: LayerKind, dim: usize, heads: usize, mlp_hidden: usize, state: usize) -> usize {
        let mixer = match kind {
            LayerKind::Mixer => MambaMixer::<T>::count(dim, state),
            LayerKind::Attention => WindowAttention::<T>::count(AttentionKind::Local, dim, heads, None),
        };
        4 * dim + mixer + mlp_count(dim, mlp_hidden)
    }
}

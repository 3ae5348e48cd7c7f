//! Window multi-head self-attention: the local variant (query, key and value
//! from the window) and the global variant, whose query is the stage-shared
//! global token repeated to every window.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::nn::{linear_count, module_fields, Ctx, Linear, Param, ParamInit};
use crate::tensor::{Element, Var};

/// Flat index `(Δy+p−1)·(2p−1) + (Δx+p−1)` for every ordered token pair of a
/// `p × p` window, row-major over `[p², p²]`.
pub fn relative_position_index(p: usize) -> Result<Vec<usize>> {
    if p == 0 {
        return Err(Error::Config("window extent must be at least 1".into()));
    }
    let n = p * p;
    let span = 2 * p - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / p, i % p);
        for j in 0..n {
            let (yj, xj) = (j / p, j % p);
            let dy = yi + p - 1 - yj;
            let dx = xi + p - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    Ok(idx)
}

/// Learnable `(2p−1)² × F` table sampled by relative displacement.
#[derive(Clone, Debug)]
pub struct RelativeBias<T> {
    pub table: Param<T>,
    pub index: Arc<Vec<usize>>,
    pub window: usize,
}
module_fields!(RelativeBias { table });

impl<T: Element> RelativeBias<T> {
    pub fn new(p: &mut ParamInit<'_>, window: usize, heads: usize) -> Result<Self> {
        let index = Arc::new(relative_position_index(window)?);
        let span = 2 * window - 1;
        Ok(RelativeBias {
            table: p.trunc_normal("table", &[span * span, heads], 0.02),
            index,
            window,
        })
    }

    /// Bias as `[F, n, n]`.
    pub fn forward(&self, ctx: &Ctx<T>) -> Result<Var<T>> {
        let n = self.window * self.window;
        let heads = self.table.shape()[1];
        ctx.param(&self.table)
            .gather_rows(Arc::clone(&self.index))?
            .reshape(&[n, n, heads])?
            .permute(&[2, 0, 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Query, key and value from one `C → 3C` projection.
    Local,
    /// Key and value from a `C → 2C` projection; the query is supplied.
    Global,
}

/// Attention output together with the post-softmax weights `[B*, F, n, n]`.
pub struct Attended<T> {
    pub output: Var<T>,
    pub weights: Var<T>,
}

#[derive(Clone, Debug)]
pub struct WindowAttention<T> {
    pub kind: AttentionKind,
    pub dim: usize,
    pub heads: usize,
    /// Input projection: `C → 3C` (local) or `C → 2C` (global).
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub bias: Option<RelativeBias<T>>,
}
module_fields!(WindowAttention { qkv, proj, bias });

impl<T: Element> WindowAttention<T> {
    /// Window attention with relative position bias over `window × window` windows.
    pub fn new(p: &mut ParamInit<'_>, kind: AttentionKind, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let mut a = Self::without_bias(p, kind, dim, heads)?;
        a.bias = Some(RelativeBias::new(&mut p.scope("rel_bias"), window, heads)?);
        Ok(a)
    }

    /// Plain multi-head attention over any token count (no position bias).
    pub fn without_bias(p: &mut ParamInit<'_>, kind: AttentionKind, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let width = match kind {
            AttentionKind::Local => 3 * dim,
            AttentionKind::Global => 2 * dim,
        };
        Ok(WindowAttention {
            kind,
            dim,
            heads,
            qkv: Linear::new(
                &mut p.scope(if kind == AttentionKind::Local { "qkv" } else { "kv" }),
                dim,
                width,
                true,
            ),
            proj: Linear::new(&mut p.scope("proj"), dim, dim, true),
            bias: None,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn check_tokens(&self, x: &Var<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::Shape(format!(
                "attention expects [B*, n, {}], got {s:?}",
                self.dim
            )));
        }
        if let Some(b) = &self.bias {
            let n = b.window * b.window;
            if s[1] != n {
                return Err(Error::Shape(format!("attention window holds {n} tokens, got {}", s[1])));
            }
        }
        Ok((s[0], s[1]))
    }

    /// `[B*, n, C] -> [B*, F, n, d]`
    fn heads_split(&self, t: &Var<T>) -> Result<Var<T>> {
        let s = t.shape();
        t.reshape(&[s[0], s[1], self.heads, self.head_dim()])?
            .permute(&[0, 2, 1, 3])
    }

    /// Projects `x` and splits it into per-head tensors `[B*, F, n, d]`.
    fn project(&self, ctx: &Ctx<T>, x: &Var<T>, parts: usize) -> Result<Vec<Var<T>>> {
        let (bs, n) = (x.shape()[0], x.shape()[1]);
        let y = self.qkv.forward(ctx, x)?;
        let y = y
            .reshape(&[bs, n, parts, self.heads, self.head_dim()])?
            .permute(&[2, 0, 3, 1, 4])?;
        y.split(0, &vec![1; parts])?
            .into_iter()
            .map(|t| t.reshape(&[bs, self.heads, n, self.head_dim()]))
            .collect()
    }

    /// `Softmax(q·kᵀ/√d + b)·v`, heads merged and output-projected.
    fn attend(&self, ctx: &Ctx<T>, q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Result<Attended<T>> {
        let (bs, n) = (q.shape()[0], q.shape()[2]);
        let scale = T::one() / T::c(self.head_dim() as f64).sqrt();
        let mut logits = q.scale(scale).matmul_t(k)?;
        if let Some(b) = &self.bias {
            logits = logits.add_bcast(&b.forward(ctx)?)?;
        }
        let weights = logits.softmax(3)?;
        let merged = weights.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[bs, n, self.dim])?;
        Ok(Attended {
            output: self.proj.forward(ctx, &merged)?,
            weights,
        })
    }

    /// Local attention on window tokens `[B*, n, C]`.
    pub fn forward_local(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Attended<T>> {
        if self.kind != AttentionKind::Local {
            return Err(Error::Config("forward_local on a global attention block".into()));
        }
        self.check_tokens(x)?;
        let _g = flops::scope(Category::Attention);
        let qkv = self.project(ctx, x, 3)?;
        self.attend(ctx, &qkv[0], &qkv[1], &qkv[2])
    }

    /// Global attention: window tokens `[B·N, n, C]` attend from the shared
    /// query `q_g: [B, C, h, w]`, repeated to each of the N windows.
    pub fn forward_global(&self, ctx: &Ctx<T>, x: &Var<T>, q_global: &Var<T>) -> Result<Attended<T>> {
        let (bs, n) = self.check_tokens(x)?;
        let s = q_global.shape();
        if s.len() != 4 || s[1] != self.dim || s[2] * s[3] != n {
            return Err(Error::Shape(format!(
                "global query {s:?} does not match {n} tokens of width {}",
                self.dim
            )));
        }
        let b = s[0];
        if bs % b != 0 {
            return Err(Error::Shape(format!(
                "global query batch {b} does not divide token batch {bs}"
            )));
        }
        let q_tokens = q_global
            .reshape(&[b, self.dim, n])?
            .permute(&[0, 2, 1])?
            .repeat_batch(bs / b)?;
        self.forward_with_query(ctx, x, &q_tokens)
    }

    /// Global attention with an explicit per-window query `[B*, n, C]` in place
    /// of the repeated global token. Used to compare against local attention.
    pub fn forward_with_query(&self, ctx: &Ctx<T>, x: &Var<T>, q_tokens: &Var<T>) -> Result<Attended<T>> {
        if self.kind != AttentionKind::Global {
            return Err(Error::Config("forward_with_query on a local attention block".into()));
        }
        self.check_tokens(x)?;
        if q_tokens.shape() != x.shape() {
            return Err(Error::dim("global query tokens", q_tokens.shape(), x.shape()));
        }
        let _g = flops::scope(Category::Attention);
        let kv = self.project(ctx, x, 2)?;
        let q = self.heads_split(q_tokens)?;
        self.attend(ctx, &q, &kv[0], &kv[1])
    }

    /// Parameter count of one block. A global block has exactly `C² + C` fewer.
    pub fn count(kind: AttentionKind, dim: usize, heads: usize, window: Option<usize>) -> usize {
        let width = match kind {
            AttentionKind::Local => 3 * dim,
            AttentionKind::Global => 2 * dim,
        };
        let bias = window.map_or(0, |p| (2 * p - 1) * (2 * p - 1) * heads);
        linear_count(dim, width, true) + linear_count(dim, dim, true) + bias
    }

    /// MACs over `tokens` tokens split into windows of `n` tokens.
    /// Local: `2·HW·(2C² + n·C)`; global drops the query projection (`HW·C²`).
    pub fn macs(kind: AttentionKind, dim: usize, tokens: usize, n: usize) -> u64 {
        let (hw, c, n) = (tokens as u64, dim as u64, n as u64);
        let closed = 2 * hw * (2 * c * c + n * c);
        match kind {
            AttentionKind::Local => closed,
            AttentionKind::Global => closed - hw * c * c,
        }
    }
}

//! Window partition/reverse and the overlapping-patch stem.
//!
//! Partitioned tensors are `[B·N, h·w, C]` with the window index inner to the
//! batch index (`b·N + n`), windows in row-major (row-block, col-block) order
//! and tokens row-major within each window.

use crate::blocks::FusedMbConv;
use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::nn::{module_fields, Conv2d, Ctx, ParamInit};
use crate::tensor::{ConvSpec, Element, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub win_h: usize,
    pub win_w: usize,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, win_h: usize, win_w: usize) -> Result<Self> {
        if win_h == 0 || win_w == 0 || !height.is_multiple_of(win_h) || !width.is_multiple_of(win_w) {
            return Err(Error::Layout(format!(
                "{height}x{width} is not divisible into {win_h}x{win_w} windows"
            )));
        }
        Ok(WindowLayout {
            height,
            width,
            win_h,
            win_w,
        })
    }

    pub fn square(extent: usize, window: usize) -> Result<Self> {
        Self::new(extent, extent, window, window)
    }

    pub fn rows(&self) -> usize {
        self.height / self.win_h
    }

    pub fn cols(&self) -> usize {
        self.width / self.win_w
    }

    /// Windows per image.
    pub fn count(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Tokens per window.
    pub fn tokens(&self) -> usize {
        self.win_h * self.win_w
    }
}

/// `[B, H, W, C] -> [B·N, h·w, C]`
pub fn partition_nhwc<T: Element>(x: &Var<T>, layout: &WindowLayout) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != layout.height || s[2] != layout.width {
        return Err(Error::Layout(format!(
            "tensor {s:?} does not match layout {}x{}",
            layout.height, layout.width
        )));
    }
    let (b, c) = (s[0], s[3]);
    x.reshape(&[b, layout.rows(), layout.win_h, layout.cols(), layout.win_w, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * layout.count(), layout.tokens(), c])
}

/// `[B·N, h·w, C] -> [B, H, W, C]`
pub fn reverse_nhwc<T: Element>(tokens: &Var<T>, layout: &WindowLayout) -> Result<Var<T>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != layout.tokens() || !s[0].is_multiple_of(layout.count()) {
        return Err(Error::Layout(format!(
            "tokens {s:?} do not match {} windows of {} tokens",
            layout.count(),
            layout.tokens()
        )));
    }
    let (b, c) = (s[0] / layout.count(), s[2]);
    tokens
        .reshape(&[b, layout.rows(), layout.cols(), layout.win_h, layout.win_w, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, layout.height, layout.width, c])
}

/// `[B, C, H, W] -> [B·N, h·w, C]`
pub fn window_partition<T: Element>(x: &Var<T>, layout: &WindowLayout) -> Result<Var<T>> {
    if x.shape().len() != 4 {
        return Err(Error::Layout(format!(
            "window_partition needs [B,C,H,W], got {:?}",
            x.shape()
        )));
    }
    partition_nhwc(&x.permute(&[0, 2, 3, 1])?, layout)
}

/// `[B·N, h·w, C] -> [B, C, H, W]`, the exact inverse of [`window_partition`].
pub fn window_reverse<T: Element>(tokens: &Var<T>, layout: &WindowLayout) -> Result<Var<T>> {
    reverse_nhwc(tokens, layout)?.permute(&[0, 3, 1, 2])
}

/// Overlapping-patch stem: 3×3 stride-2 conv (padding 1) followed by one
/// Fused-MBConv. Halves the spatial extent.
#[derive(Clone, Debug)]
pub struct PatchStem<T> {
    pub conv: Conv2d<T>,
    pub mbconv: FusedMbConv<T>,
}
module_fields!(PatchStem { conv, mbconv });

impl<T: Element> PatchStem<T> {
    pub fn new(p: &mut ParamInit<'_>, in_ch: usize, dim: usize, se_ratio: usize) -> Result<Self> {
        Ok(PatchStem {
            conv: Conv2d::new(&mut p.scope("conv"), in_ch, dim, 3, ConvSpec::new(2, 1, 1), true)?,
            mbconv: FusedMbConv::new(&mut p.scope("mbconv"), dim, se_ratio)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 4 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
            return Err(Error::Config(format!(
                "stem input must be [B,C,H,W] with H, W divisible by 4, got {s:?}"
            )));
        }
        let _g = flops::scope(Category::Conv);
        let h = self.conv.forward(ctx, x)?;
        self.mbconv.forward(ctx, &h)
    }
}

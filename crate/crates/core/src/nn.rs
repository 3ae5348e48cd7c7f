//! Named parameters, the forward context, and the common layers every block
//! is assembled from.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::tensor::init::Initializer;
use crate::tensor::{ConvSpec, Element, Grads, Tape, Tensor, Var};

/// A named weight tensor. Names are dotted paths, unique within a model.
#[derive(Clone, Debug)]
pub struct Param<T> {
    name: String,
    value: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Replaces the value; the shape must not change.
    pub fn set(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: expected {:?}, got {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.value = Tensor::full(self.value.shape(), v);
    }
}

/// Anything that owns parameters.
pub trait Module<T: Element> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value().numel());
        n
    }

    /// Sets every parameter to zero.
    fn zero_all(&mut self) {
        self.visit_mut(&mut |p| p.fill(T::zero()));
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for m in self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for m in self {
            m.visit_mut(f);
        }
    }
}

impl<T: Element, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

impl<T: Element> Module<T> for Param<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(self);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(self);
    }
}

/// Implements [`Module`] by visiting the listed fields in order.
macro_rules! module_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Element> $crate::nn::Module<T> for $ty<T> {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a $crate::nn::Param<T>)) {
                $( $crate::nn::Module::visit(&self.$field, f); )*
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut $crate::nn::Param<T>)) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, f); )*
            }
        }
    };
}
#[allow(unused_imports)]
pub(crate) use module_fields;

/// Forward-pass context: either plain evaluation, or recording on a tape with
/// one leaf per parameter name.
pub struct Ctx<T> {
    tape: Option<Tape<T>>,
    leaves: RefCell<HashMap<String, Var<T>>>,
}

impl<T: Element> Ctx<T> {
    pub fn eval() -> Self {
        Ctx {
            tape: None,
            leaves: RefCell::new(HashMap::new()),
        }
    }

    pub fn train() -> Self {
        Ctx {
            tape: Some(Tape::new()),
            leaves: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.tape.as_ref()
    }

    pub fn param(&self, p: &Param<T>) -> Var<T> {
        match &self.tape {
            None => Var::constant(p.value().clone()),
            Some(tape) => self
                .leaves
                .borrow_mut()
                .entry(p.name().to_owned())
                .or_insert_with(|| tape.leaf(p.value().clone()))
                .clone(),
        }
    }

    /// Input that gradients flow back to when recording.
    pub fn leaf(&self, t: Tensor<T>) -> Var<T> {
        match &self.tape {
            None => Var::constant(t),
            Some(tape) => tape.leaf(t),
        }
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var::constant(t)
    }

    /// Gradient for a named parameter used during the recorded forward.
    pub fn param_grad(&self, grads: &Grads<T>, name: &str) -> Option<Tensor<T>> {
        let leaves = self.leaves.borrow();
        leaves.get(name).and_then(|v| grads.get(v).cloned())
    }
}

/// Names parameters by dotted path while drawing them from one seeded stream.
pub struct ParamInit<'a> {
    init: &'a mut Initializer,
    prefix: String,
}

impl<'a> ParamInit<'a> {
    pub fn new(init: &'a mut Initializer) -> Self {
        ParamInit {
            init,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: impl std::fmt::Display) -> ParamInit<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamInit {
            init: self.init,
            prefix,
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_owned()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn rng(&mut self) -> &mut Initializer {
        self.init
    }

    pub fn trunc_normal<T: Element>(&mut self, leaf: &str, shape: &[usize], std: f64) -> Param<T> {
        let v = self.init.trunc_normal(shape, std);
        Param::new(self.name(leaf), v)
    }

    pub fn kaiming<T: Element>(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Param<T> {
        let v = self.init.kaiming_normal(shape, fan_in);
        Param::new(self.name(leaf), v)
    }

    pub fn constant<T: Element>(&mut self, leaf: &str, shape: &[usize], value: f64) -> Param<T> {
        Param::new(self.name(leaf), Tensor::full(shape, T::c(value)))
    }

    pub fn tensor<T: Element>(&mut self, leaf: &str, value: Tensor<T>) -> Param<T> {
        Param::new(self.name(leaf), value)
    }
}

/// `y = x·Wᵀ + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}
module_fields!(Linear { weight, bias });

impl<T: Element> Linear<T> {
    pub fn new(p: &mut ParamInit<'_>, in_f: usize, out_f: usize, bias: bool) -> Self {
        Linear {
            weight: p.trunc_normal("weight", &[out_f, in_f], 0.02),
            bias: bias.then(|| p.constant("bias", &[out_f], 0.0)),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        x.linear(&w, b.as_ref())
    }
}

/// Parameter count of an `in → out` linear layer.
pub fn linear_count(in_f: usize, out_f: usize, bias: bool) -> usize {
    in_f * out_f + if bias { out_f } else { 0 }
}

pub fn conv_count(cin: usize, cout: usize, kernel: usize, groups: usize, bias: bool) -> usize {
    cout * (cin / groups) * kernel * kernel + if bias { cout } else { 0 }
}

pub fn mlp_count(dim: usize, hidden: usize) -> usize {
    linear_count(dim, hidden, true) + linear_count(hidden, dim, true)
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}
module_fields!(LayerNorm { gamma, beta });

impl<T: Element> LayerNorm<T> {
    pub fn new(p: &mut ParamInit<'_>, c: usize) -> Self {
        LayerNorm {
            gamma: p.constant("gamma", &[c], 1.0),
            beta: p.constant("beta", &[c], 0.0),
        }
    }

    /// Normalizes over the last axis.
    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        x.layernorm(&ctx.param(&self.gamma), &ctx.param(&self.beta), T::c(LN_EPS))
    }

    /// Normalizes `[N, C, H, W]` over the channel axis.
    pub fn forward_channels(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let nhwc = x.permute(&[0, 2, 3, 1])?;
        self.forward(ctx, &nhwc)?.permute(&[0, 3, 1, 2])
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: ConvSpec,
}
module_fields!(Conv2d { weight, bias });

impl<T: Element> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &mut ParamInit<'_>,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        if spec.groups == 0 || !cin.is_multiple_of(spec.groups) || !cout.is_multiple_of(spec.groups) {
            return Err(Error::Config(format!(
                "conv {cin}->{cout} not divisible by groups {}",
                spec.groups
            )));
        }
        let cin_g = cin / spec.groups;
        Ok(Conv2d {
            weight: p.kaiming("weight", &[cout, cin_g, kernel, kernel], cin_g * kernel * kernel),
            bias: bias.then(|| p.constant("bias", &[cout], 0.0)),
            spec,
        })
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        x.conv2d(&w, b.as_ref(), self.spec)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
module_fields!(Mlp { fc1, fc2 });

impl<T: Element> Mlp<T> {
    pub fn new(p: &mut ParamInit<'_>, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(&mut p.scope("fc1"), dim, hidden, true),
            fc2: Linear::new(&mut p.scope("fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let _g = flops::scope(Category::Mlp);
        let h = self.fc1.forward(ctx, x)?.gelu();
        self.fc2.forward(ctx, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_names_follow_scopes() {
        let mut init = Initializer::new(0);
        let mut root = ParamInit::new(&mut init);
        let mut stage = root.scope("stage0");
        let lin: Linear<f32> = Linear::new(&mut stage.scope("qkv"), 4, 12, true);
        assert_eq!(lin.weight.name(), "stage0.qkv.weight");
        assert_eq!(lin.bias.as_ref().unwrap().name(), "stage0.qkv.bias");
        assert_eq!(lin.num_params(), linear_count(4, 12, true));
    }

    #[test]
    fn ctx_shares_one_leaf_per_param() {
        let mut init = Initializer::new(0);
        let lin: Linear<f64> = Linear::new(&mut ParamInit::new(&mut init), 2, 2, false);
        let ctx = Ctx::train();
        let x = ctx.constant(Tensor::ones(&[1, 2]));
        let y = lin
            .forward(&ctx, &x)
            .unwrap()
            .add(&lin.forward(&ctx, &x).unwrap())
            .unwrap()
            .sum();
        let grads = y.backward().unwrap();
        let gw = ctx.param_grad(&grads, "weight").unwrap();
        assert_eq!(gw.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut p = Param::<f32>::new("w", Tensor::zeros(&[2, 2]));
        assert!(p.set(Tensor::zeros(&[4])).is_err());
        assert!(p.set(Tensor::ones(&[2, 2])).is_ok());
    }
}

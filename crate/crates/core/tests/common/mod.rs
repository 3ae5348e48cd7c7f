#![allow(dead_code)]

use gcvk::nn::{Linear, Module};
use gcvk::tensor::init::Initializer;
use gcvk::{Element, Tensor};

/// Replaces every parameter with fresh `N(0, std²)` draws.
pub fn randomize<T: Element, M: Module<T>>(m: &mut M, seed: u64, std: f64) {
    let mut init = Initializer::new(seed);
    m.visit_mut(&mut |p| {
        let t = init.randn(p.shape(), std);
        p.set(t).unwrap();
    });
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Initializer::new(seed).randn(shape, 1.0)
}

/// `y = W·x + b` for one row, by scalar loops.
pub fn linear_row(lin: &Linear<f64>, x: &[f64]) -> Vec<f64> {
    let w = lin.weight.value();
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    (0..out)
        .map(|o| {
            let b = lin.bias.as_ref().map_or(0.0, |b| b.value().data()[o]);
            b + (0..inp).map(|i| w.data()[o * inp + i] * x[i]).sum::<f64>()
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

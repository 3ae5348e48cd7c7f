mod common;

use common::{linear_row, max_abs, randn, randomize, softmax};
use gcvk::attention::{relative_position_index, AttentionKind, WindowAttention};
use gcvk::nn::{Ctx, Linear, Module, ParamInit};
use gcvk::tensor::init::Initializer;
use gcvk::{Tensor, Var};

fn attention(kind: AttentionKind, dim: usize, heads: usize, window: Option<usize>, seed: u64) -> WindowAttention<f64> {
    let mut init = Initializer::new(seed);
    let mut p = ParamInit::new(&mut init);
    let mut a = match window {
        Some(w) => WindowAttention::new(&mut p, kind, dim, heads, w).unwrap(),
        None => WindowAttention::without_bias(&mut p, kind, dim, heads).unwrap(),
    };
    randomize(&mut a, seed + 1, 0.4);
    a
}

/// Scalar-loop attention for one window: `q`, `k`, `v` are `[n][C]`.
fn naive_window(a: &WindowAttention<f64>, q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<f64> {
    let n = k.len();
    let d = a.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let index = a
        .bias
        .as_ref()
        .map(|b| (relative_position_index(b.window).unwrap(), b.table.value().clone()));
    let mut merged = vec![vec![0.0; a.dim]; n];
    for h in 0..a.heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = (0..d).map(|t| q[i][h * d + t] * k[j][h * d + t]).sum();
                    let bias = index
                        .as_ref()
                        .map_or(0.0, |(idx, table)| table.data()[idx[i * n + j] * a.heads + h]);
                    dot * scale + bias
                })
                .collect();
            let w = softmax(&logits);
            for t in 0..d {
                merged[i][h * d + t] = (0..n).map(|j| w[j] * v[j][h * d + t]).sum();
            }
        }
    }
    merged.iter().flat_map(|row| linear_row(&a.proj, row)).collect()
}

fn rows(x: &Tensor<f64>, w: usize) -> Vec<Vec<f64>> {
    let (n, c) = (x.shape()[1], x.shape()[2]);
    (0..n)
        .map(|i| x.data()[(w * n + i) * c..(w * n + i + 1) * c].to_vec())
        .collect()
}

fn split_qkv(a: &WindowAttention<f64>, tokens: &[Vec<f64>], parts: usize) -> Vec<Vec<Vec<f64>>> {
    let c = a.dim;
    let projected: Vec<Vec<f64>> = tokens.iter().map(|t| linear_row(&a.qkv, t)).collect();
    (0..parts)
        .map(|p| projected.iter().map(|r| r[p * c..(p + 1) * c].to_vec()).collect())
        .collect()
}

#[test]
fn local_attention_matches_scalar_loops() {
    let a = attention(AttentionKind::Local, 8, 2, Some(3), 1);
    let x = randn(&[3, 9, 8], 2);
    let got = a
        .forward_local(&Ctx::eval(), &Var::constant(x.clone()))
        .unwrap()
        .output
        .into_value();
    for w in 0..3 {
        let p = split_qkv(&a, &rows(&x, w), 3);
        let expect = naive_window(&a, &p[0], &p[1], &p[2]);
        let err = max_abs(&got.data()[w * 72..(w + 1) * 72], &expect);
        assert!(err < 1e-12, "window {w}: {err}");
    }
}

#[test]
fn global_attention_matches_scalar_loops() {
    let a = attention(AttentionKind::Global, 8, 4, Some(2), 3);
    let x = randn(&[4, 4, 8], 4);
    let qg = randn(&[2, 8, 2, 2], 5);
    let got = a
        .forward_global(&Ctx::eval(), &Var::constant(x.clone()), &Var::constant(qg.clone()))
        .unwrap();
    let got = got.output.into_value();
    for w in 0..4 {
        let b = w / 2;
        let q: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..8).map(|c| qg.data()[(b * 8 + c) * 4 + i]).collect())
            .collect();
        let kv = split_qkv(&a, &rows(&x, w), 2);
        let expect = naive_window(&a, &q, &kv[0], &kv[1]);
        assert!(
            max_abs(&got.data()[w * 32..(w + 1) * 32], &expect) < 1e-12,
            "window {w}"
        );
    }
}

#[test]
fn batched_global_attention_equals_per_window_loop_bitwise() {
    let a = attention(AttentionKind::Global, 16, 2, Some(2), 6);
    let (batch, windows) = (3, 4);
    let x = randn(&[batch * windows, 4, 16], 7);
    let qg = randn(&[batch, 16, 2, 2], 8);
    let ctx = Ctx::eval();
    let full = a
        .forward_global(&ctx, &Var::constant(x.clone()), &Var::constant(qg.clone()))
        .unwrap();
    let mut parts = Vec::new();
    for w in 0..batch * windows {
        let xw = Var::constant(x.narrow(0, w, 1).unwrap());
        let qw = Var::constant(qg.narrow(0, w / windows, 1).unwrap());
        parts.push(a.forward_global(&ctx, &xw, &qw).unwrap().output.into_value());
    }
    let looped = Tensor::concat(&parts, 0).unwrap();
    assert!(full.output.value().bit_eq(&looped));
}

#[test]
fn injected_window_queries_reproduce_local_attention() {
    let (dim, heads, window) = (8, 2, 3);
    let local = attention(AttentionKind::Local, dim, heads, Some(window), 9);
    let mut global = attention(AttentionKind::Global, dim, heads, Some(window), 10);
    // Global block shares the local block's k/v rows, output projection and bias.
    let w = local.qkv.weight.value();
    let b = local.qkv.bias.as_ref().unwrap().value();
    global.qkv.weight.set(w.narrow(0, dim, 2 * dim).unwrap()).unwrap();
    global
        .qkv
        .bias
        .as_mut()
        .unwrap()
        .set(b.narrow(0, dim, 2 * dim).unwrap())
        .unwrap();
    global.proj = local.proj.clone();
    global.bias = local.bias.clone();
    let q_proj = Linear {
        weight: gcvk::nn::Param::new("q.weight", w.narrow(0, 0, dim).unwrap()),
        bias: Some(gcvk::nn::Param::new("q.bias", b.narrow(0, 0, dim).unwrap())),
    };

    let ctx = Ctx::eval();
    let x = Var::constant(randn(&[5, 9, dim], 11));
    let q = q_proj.forward(&ctx, &x).unwrap();
    let injected = global.forward_with_query(&ctx, &x, &q).unwrap().output.into_value();
    let reference = local.forward_local(&ctx, &x).unwrap().output.into_value();
    assert!(injected.max_abs_diff(&reference) < 1e-6);
}

#[test]
fn attention_rows_are_distributions() {
    let mut init = Initializer::new(12);
    let a: WindowAttention<f32> =
        WindowAttention::new(&mut ParamInit::new(&mut init), AttentionKind::Local, 16, 4, 4).unwrap();
    let x = Var::constant(Initializer::new(13).randn(&[2, 16, 16], 3.0));
    let w = a.forward_local(&Ctx::eval(), &x).unwrap().weights.into_value();
    assert_eq!(w.shape(), &[2, 4, 16, 16]);
    for row in w.data().chunks(16) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-5, "{s}");
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn permuting_windows_permutes_outputs() {
    let a = attention(AttentionKind::Local, 8, 2, Some(2), 14);
    let x = randn(&[5, 4, 8], 15);
    let perm = [3, 0, 4, 1, 2];
    let shuffled = Tensor::concat(&perm.iter().map(|&i| x.narrow(0, i, 1).unwrap()).collect::<Vec<_>>(), 0).unwrap();
    let ctx = Ctx::eval();
    let y = a.forward_local(&ctx, &Var::constant(x)).unwrap().output.into_value();
    let ys = a
        .forward_local(&ctx, &Var::constant(shuffled))
        .unwrap()
        .output
        .into_value();
    for (k, &i) in perm.iter().enumerate() {
        assert!(ys.narrow(0, k, 1).unwrap().bit_eq(&y.narrow(0, i, 1).unwrap()));
    }
}

#[test]
fn single_token_window_returns_projected_value() {
    let a = attention(AttentionKind::Local, 4, 1, Some(1), 16);
    let x = randn(&[3, 1, 4], 17);
    let out = a.forward_local(&Ctx::eval(), &Var::constant(x.clone())).unwrap();
    assert!(out.weights.value().data().iter().all(|&w| w == 1.0));
    for b in 0..3 {
        let v = split_qkv(&a, &rows(&x, b), 3).remove(2);
        let expect = linear_row(&a.proj, &v[0]);
        assert!(max_abs(&out.output.value().data()[b * 4..(b + 1) * 4], &expect) < 1e-12);
    }
}

#[test]
fn two_token_attention_without_bias() {
    let a = attention(AttentionKind::Local, 6, 3, None, 18);
    let x = randn(&[2, 2, 6], 19);
    let got = a
        .forward_local(&Ctx::eval(), &Var::constant(x.clone()))
        .unwrap()
        .output
        .into_value();
    for w in 0..2 {
        let p = split_qkv(&a, &rows(&x, w), 3);
        assert!(
            max_abs(
                &got.data()[w * 12..(w + 1) * 12],
                &naive_window(&a, &p[0], &p[1], &p[2])
            ) < 1e-12
        );
    }
}

#[test]
fn zero_query_and_bias_average_the_values() {
    let mut a = attention(AttentionKind::Global, 8, 2, Some(2), 20);
    a.bias.as_mut().unwrap().table.fill(0.0);
    let x = randn(&[2, 4, 8], 21);
    let q = Var::constant(Tensor::zeros(&[2, 8, 2, 2]));
    let out = a.forward_global(&Ctx::eval(), &Var::constant(x.clone()), &q).unwrap();
    assert!(out.weights.value().data().iter().all(|&w| (w - 0.25).abs() < 1e-15));
    for w in 0..2 {
        let v = split_qkv(&a, &rows(&x, w), 2).remove(1);
        let mean: Vec<f64> = (0..8).map(|c| v.iter().map(|r| r[c]).sum::<f64>() / 4.0).collect();
        let expect = linear_row(&a.proj, &mean);
        for i in 0..4 {
            let row = &out.output.value().data()[(w * 4 + i) * 8..(w * 4 + i + 1) * 8];
            assert!(max_abs(row, &expect) < 1e-12);
        }
    }
}

#[test]
fn heads_own_contiguous_channel_blocks() {
    // Zeroing head 1's value rows must zero exactly channels 4..8 of the merged
    // output (identity output projection).
    let mut a = attention(AttentionKind::Local, 8, 2, None, 22);
    let mut w = a.qkv.weight.value().to_vec();
    let mut b = a.qkv.bias.as_ref().unwrap().value().to_vec();
    for o in 16 + 4..24 {
        w[o * 8..(o + 1) * 8].fill(0.0);
        b[o] = 0.0;
    }
    a.qkv.weight.set(Tensor::from_vec(&[24, 8], w).unwrap()).unwrap();
    a.qkv
        .bias
        .as_mut()
        .unwrap()
        .set(Tensor::from_vec(&[24], b).unwrap())
        .unwrap();
    let eye: Vec<f64> = (0..64).map(|i| if i / 8 == i % 8 { 1.0 } else { 0.0 }).collect();
    a.proj.weight.set(Tensor::from_vec(&[8, 8], eye).unwrap()).unwrap();
    a.proj.bias.as_mut().unwrap().fill(0.0);
    let y = a
        .forward_local(&Ctx::eval(), &Var::constant(randn(&[1, 5, 8], 23)))
        .unwrap()
        .output
        .into_value();
    for row in y.data().chunks(8) {
        assert!(row[..4].iter().all(|&v| v != 0.0));
        assert!(row[4..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn global_blocks_have_one_projection_fewer() {
    for (dim, heads, win) in [(64, 2, 7), (128, 4, 14), (8, 1, 4)] {
        let local = WindowAttention::<f32>::count(AttentionKind::Local, dim, heads, Some(win));
        let global = WindowAttention::<f32>::count(AttentionKind::Global, dim, heads, Some(win));
        assert_eq!(local - global, dim * dim + dim);
        let mut init = Initializer::new(0);
        let built: WindowAttention<f32> =
            WindowAttention::new(&mut ParamInit::new(&mut init), AttentionKind::Global, dim, heads, win).unwrap();
        assert_eq!(built.num_params(), global);
    }
}

#![allow(clippy::needless_range_loop)]

mod common;

use common::{max_abs, randn, randomize};
use gcvk::blocks::{gtg_repeats, Downsample, DownsamplerKind, FusedMbConv, GlobalTokenGen};
use gcvk::model::{MixerKind, ModelConfig, VARIANTS};
use gcvk::nn::{Conv2d, Ctx, ParamInit};
use gcvk::tensor::init::Initializer;
use gcvk::windowing::PatchStem;
use gcvk::{Error, Tensor, Var};

/// Dense `[C][H][W]` image.
type Image = Vec<Vec<Vec<f64>>>;

fn image(t: &Tensor<f64>, n: usize) -> Image {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    (0..c)
        .map(|ci| {
            (0..h)
                .map(|y| (0..w).map(|x| t.data()[((n * c + ci) * h + y) * w + x]).collect())
                .collect()
        })
        .collect()
}

fn flat(img: &Image) -> Vec<f64> {
    img.iter().flatten().flatten().copied().collect()
}

/// Direct six-loop convolution with zero padding.
fn conv(cv: &Conv2d<f64>, x: &Image) -> Image {
    let ws = cv.weight.shape();
    let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
    let (stride, pad, groups) = (cv.spec.stride, cv.spec.padding.0, cv.spec.groups);
    let (h, w) = (x[0].len(), x[0][0].len());
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    let wt = cv.weight.value().data();
    let bias = cv.bias.as_ref().map(|b| b.value().to_vec());
    let per_group = cout / groups;
    (0..cout)
        .map(|o| {
            let g = o / per_group;
            (0..oh)
                .map(|oy: usize| {
                    (0..ow)
                        .map(|ox: usize| {
                            let mut acc = bias.as_ref().map_or(0.0, |b| b[o]);
                            for ci in 0..cin_g {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                            acc += wt[((o * cin_g + ci) * k + ky) * k + kx]
                                                * x[g * cin_g + ci][iy as usize][ix as usize];
                                        }
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

fn mbconv(m: &FusedMbConv<f64>, x: &Image) -> Image {
    let h: Image = conv(&m.dw, x)
        .into_iter()
        .map(|c| c.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect())
        .collect();
    let pooled: Vec<f64> = h
        .iter()
        .map(|c| c.iter().flatten().sum::<f64>() / (c.len() * c[0].len()) as f64)
        .collect();
    let hidden: Vec<f64> = common::linear_row(&m.se.reduce, &pooled)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let gate: Vec<f64> = common::linear_row(&m.se.expand, &hidden)
        .into_iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    let gated: Image = h
        .iter()
        .zip(&gate)
        .map(|(c, g)| c.iter().map(|r| r.iter().map(|v| v * g).collect()).collect())
        .collect();
    let out = conv(&m.pw, &gated);
    out.iter()
        .zip(x)
        .map(|(o, i)| {
            o.iter()
                .zip(i)
                .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
                .collect()
        })
        .collect()
}

fn built<M>(seed: u64, f: impl FnOnce(&mut ParamInit<'_>) -> M) -> M {
    let mut init = Initializer::new(seed);
    f(&mut ParamInit::new(&mut init))
}

#[test]
fn fused_mbconv_matches_scalar_loops() {
    let mut m: FusedMbConv<f64> = built(1, |p| FusedMbConv::new(p, 8, 4).unwrap());
    randomize(&mut m, 2, 0.4);
    let x = randn(&[2, 8, 5, 6], 3);
    let y = m.forward(&Ctx::eval(), &Var::constant(x.clone())).unwrap().into_value();
    for n in 0..2 {
        let expect = flat(&mbconv(&m, &image(&x, n)));
        let per = expect.len();
        assert!(max_abs(&y.data()[n * per..(n + 1) * per], &expect) < 1e-12);
    }
}

#[test]
fn downsample_matches_constructed_weights() {
    for kind in [DownsamplerKind::Conv, DownsamplerKind::MaxPool] {
        let mut d: Downsample<f64> = built(4, |p| Downsample::new(p, 4, 8, 2, kind).unwrap());
        randomize(&mut d, 5, 0.4);
        let x = randn(&[1, 4, 6, 6], 6);
        let y = d.forward(&Ctx::eval(), &Var::constant(x.clone())).unwrap().into_value();
        assert_eq!(y.shape(), &[1, 8, 3, 3]);

        let h = mbconv(&d.mbconv, &image(&x, 0));
        let h = match kind {
            DownsamplerKind::Conv => conv(&d.reduction, &h),
            DownsamplerKind::MaxPool => {
                let pooled: Image = h
                    .iter()
                    .map(|c| {
                        (0..3)
                            .map(|oy: usize| {
                                (0..3)
                                    .map(|ox: usize| {
                                        let mut m = f64::NEG_INFINITY;
                                        for y in (2 * oy).saturating_sub(1)..=(2 * oy + 1).min(5) {
                                            for x in (2 * ox).saturating_sub(1)..=(2 * ox + 1).min(5) {
                                                m = m.max(c[y][x]);
                                            }
                                        }
                                        m
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                conv(&d.reduction, &pooled)
            }
        };
        let (g, b) = (d.norm.gamma.value().data(), d.norm.beta.value().data());
        let mut expect = vec![0.0; 72];
        for yy in 0..3 {
            for xx in 0..3 {
                let col: Vec<f64> = (0..8).map(|c| h[c][yy][xx]).collect();
                let mean = col.iter().sum::<f64>() / 8.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                for c in 0..8 {
                    expect[(c * 3 + yy) * 3 + xx] = (col[c] - mean) / (var + 1e-5).sqrt() * g[c] + b[c];
                }
            }
        }
        assert!(max_abs(y.data(), &expect) < 1e-10, "{kind:?}");
    }
}

#[test]
fn downsample_rejects_odd_extents() {
    let d: Downsample<f64> = built(0, |p| Downsample::new(p, 4, 8, 2, DownsamplerKind::Conv).unwrap());
    let r = d.forward(&Ctx::eval(), &Var::constant(Tensor::zeros(&[1, 4, 5, 6])));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn stem_halves_resolution() {
    let stem: PatchStem<f32> = built(0, |p| PatchStem::new(p, 3, 64, 4).unwrap());
    let y = stem
        .forward(
            &Ctx::eval(),
            &Var::constant(Initializer::new(1).randn(&[1, 3, 224, 224], 1.0)),
        )
        .unwrap();
    assert_eq!(y.shape(), &[1, 64, 112, 112]);
    let small: PatchStem<f64> = built(0, |p| PatchStem::new(p, 3, 8, 4).unwrap());
    let y = small
        .forward(&Ctx::eval(), &Var::constant(Tensor::zeros(&[2, 3, 8, 8])))
        .unwrap();
    assert_eq!(y.shape(), &[2, 8, 4, 4]);
    // Zero input with zero biases stays zero.
    assert!(y.value().data().iter().all(|&v| v == 0.0));
    let r = small.forward(&Ctx::eval(), &Var::constant(Tensor::zeros(&[1, 3, 6, 6])));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn token_generator_reaches_window_extent_for_every_variant() {
    for v in VARIANTS {
        let cfg = ModelConfig::preset(v).unwrap();
        if cfg.mixer != MixerKind::Gcvit {
            continue;
        }
        for i in 0..4 {
            let (res, win, dim) = (cfg.stage_resolution(i), cfg.stage_window(i), cfg.stage_dim(i));
            let reps = gtg_repeats(res, win).unwrap();
            assert_eq!(2f64.powi(reps as i32), res as f64 / win as f64, "{v} stage {i}");
            if res <= 28 {
                let g: GlobalTokenGen<f32> = built(0, |p| GlobalTokenGen::new(p, dim, res, win, cfg.se_ratio).unwrap());
                assert_eq!(g.repeats(), reps as usize);
                let q = g
                    .forward(&Ctx::eval(), &Var::constant(Tensor::zeros(&[1, dim, res, res])))
                    .unwrap();
                assert_eq!(q.shape(), &[1, dim, win, win], "{v} stage {i}");
            }
        }
    }
}

#[test]
fn token_generator_is_per_image() {
    let mut g: GlobalTokenGen<f64> = built(7, |p| GlobalTokenGen::new(p, 4, 8, 2, 2).unwrap());
    randomize(&mut g, 8, 0.4);
    let x = randn(&[3, 4, 8, 8], 9);
    let all = g.forward(&Ctx::eval(), &Var::constant(x.clone())).unwrap().into_value();
    for n in 0..3 {
        let one = g
            .forward(&Ctx::eval(), &Var::constant(x.narrow(0, n, 1).unwrap()))
            .unwrap()
            .into_value();
        assert!(one.bit_eq(&all.narrow(0, n, 1).unwrap()));
    }
}

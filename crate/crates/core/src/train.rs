//! Synthetic two-class image set and plain SGD.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Module};
use crate::tensor::{Element, Tensor, Var};

/// Images `[N, 3, S, S]` with labels: class 0 is a low-frequency plane wave,
/// class 1 a high-frequency one, both with random orientation, phase and
/// additive Gaussian noise.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

pub const NOISE_STD: f64 = 0.3;

impl<T: Element> Dataset<T> {
    pub fn two_class(samples: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = size * size;
        let mut data = Vec::with_capacity(samples * 3 * plane);
        let mut labels = Vec::with_capacity(samples);
        for i in 0..samples {
            let label = i % 2;
            let cycles = if label == 0 {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(size as f64 / 5.0..size as f64 / 3.5)
            };
            let theta: f64 = rng.random_range(0.0..PI);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let (kx, ky) = (theta.cos() * cycles / size as f64, theta.sin() * cycles / size as f64);
            for _ in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let noise: f64 = rng.sample(rand_distr::StandardNormal);
                        let v = (2.0 * PI * (kx * x as f64 + ky * y as f64) + phase).sin();
                        data.push(T::c(v + NOISE_STD * noise));
                    }
                }
            }
            labels.push(label);
        }
        Dataset {
            images: Tensor::from_vec(&[samples, 3, size, size], data).expect("consistent shape"),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let images = Tensor::from_vec(&[indices.len(), s[1], s[2], s[3]], data).expect("consistent shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// `θ ← θ − lr·∇θ` for every parameter that received a gradient.
pub fn sgd_step<T: Element, M: Module<T>>(module: &mut M, ctx: &Ctx<T>, grads: &crate::tensor::Grads<T>, lr: f64) {
    let lr = T::c(lr);
    module.visit_mut(&mut |p| {
        if let Some(g) = ctx.param_grad(grads, p.name()) {
            let data = p
                .value()
                .data()
                .iter()
                .zip(g.data())
                .map(|(&w, &d)| w - lr * d)
                .collect();
            p.set(Tensor::from_vec(p.shape(), data).expect("same shape"))
                .expect("same shape");
        }
    });
}

/// One forward/backward/update on a fixed batch; returns the loss before the update.
pub fn train_step<T: Element>(model: &mut Model<T>, images: &Tensor<T>, labels: &[usize], lr: f64) -> Result<f64> {
    let ctx = Ctx::train();
    let loss = model
        .forward(&ctx, &Var::constant(images.clone()))?
        .cross_entropy(labels)?;
    let value = loss.value().item().f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss became {value}")));
    }
    let grads = loss.backward()?;
    sgd_step(model, &ctx, &grads, lr);
    Ok(value)
}

/// Mean loss and accuracy over the whole set, evaluated in chunks.
pub fn evaluate<T: Element>(model: &Model<T>, data: &Dataset<T>, chunk: usize) -> Result<(f64, f64)> {
    let ctx = Ctx::eval();
    let (mut loss, mut correct) = (0.0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, y) = data.batch(part);
        let logits = model.forward(&ctx, &Var::constant(x))?;
        loss += logits.cross_entropy(&y)?.value().item().f64() * part.len() as f64;
        let k = logits.shape()[1];
        for (r, &label) in y.iter().enumerate() {
            let row = &logits.value().data()[r * k..(r + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best == label);
        }
    }
    let n = data.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("evaluation loss became {loss}")));
    }
    Ok((loss / n, correct as f64 / n))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Full-set evaluation period in steps (0: only at start and end).
    pub eval_every: usize,
    /// Stop once full-set accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 50,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
            eval_every: 0,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// Minibatch loss of every step, before its update.
    pub step_losses: Vec<f64>,
    /// Full-set evaluations, starting with step 0.
    pub evals: Vec<Evaluation>,
    pub steps_run: usize,
}

impl TrainReport {
    pub fn initial(&self) -> &Evaluation {
        &self.evals[0]
    }

    pub fn last(&self) -> &Evaluation {
        self.evals.last().expect("at least one evaluation")
    }

    /// First step at which full-set accuracy reached `target`.
    pub fn reached(&self, target: f64) -> Option<usize> {
        self.evals.iter().find(|e| e.accuracy >= target).map(|e| e.step)
    }
}

/// Minibatch SGD with per-epoch shuffles drawn from `opts.seed`.
pub fn train<T: Element>(model: &mut Model<T>, data: &Dataset<T>, opts: &TrainOptions) -> Result<TrainReport> {
    if data.is_empty() || opts.batch_size == 0 {
        return Err(Error::Usage("training needs data and a positive batch size".into()));
    }
    if !opts.lr.is_finite() || opts.lr < 0.0 {
        return Err(Error::Usage(format!(
            "learning rate must be finite and non-negative, got {}",
            opts.lr
        )));
    }
    let eval_chunk = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let (loss, accuracy) = evaluate(model, data, eval_chunk)?;
    let mut report = TrainReport {
        step_losses: Vec::with_capacity(opts.steps),
        evals: vec![Evaluation {
            step: 0,
            loss,
            accuracy,
        }],
        steps_run: 0,
    };
    for step in 1..=opts.steps {
        if cursor + opts.batch_size > data.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + opts.batch_size).min(data.len())];
        cursor += opts.batch_size;
        let (x, y) = data.batch(idx);
        report.step_losses.push(train_step(model, &x, &y, opts.lr)?);
        report.steps_run = step;
        if step == opts.steps || (opts.eval_every > 0 && step % opts.eval_every == 0) {
            let (loss, accuracy) = evaluate(model, data, eval_chunk)?;
            report.evals.push(Evaluation { step, loss, accuracy });
            if opts.target_accuracy.is_some_and(|t| accuracy >= t) {
                break;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_seeded_and_balanced() {
        let a: Dataset<f32> = Dataset::two_class(16, 8, 3);
        let b: Dataset<f32> = Dataset::two_class(16, 8, 3);
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 8);
        let (x, y) = a.batch(&[3, 0]);
        assert_eq!(x.shape(), &[2, 3, 8, 8]);
        assert_eq!(y, vec![1, 0]);
        assert_eq!(&x.data()[..192], &a.images.data()[3 * 192..4 * 192]);
    }
}

//! Multinomial logistic regression over block-pooled 8-bit patches.

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::heightfield::DefectLabel;
use crate::preprocess::GrayPatch8;
use crate::{rng, Error, Result};

pub const N_CLASSES: usize = 3;
pub const DEFAULT_POOL_FACTOR: usize = 4;

/// Half-width of the uniform initialization interval.
const INIT_SCALE: f64 = 1e-3;

/// Non-overlapping `pool`×`pool` block means, scaled to [0, 1]. Row-major over blocks.
pub fn featurize(g: &GrayPatch8, pool: usize) -> Result<Vec<f64>> {
    if pool == 0 || g.width() % pool != 0 || g.height() % pool != 0 {
        return Err(Error::Learner(format!(
            "{}x{} patch is not divisible by pool factor {pool}",
            g.width(),
            g.height()
        )));
    }
    let (bw, bh) = (g.width() / pool, g.height() / pool);
    let mut sums = vec![0u32; bw * bh];
    for (r, row) in g.pixels().chunks_exact(g.width()).enumerate() {
        let out = &mut sums[(r / pool) * bw..(r / pool + 1) * bw];
        for (c, &v) in row.iter().enumerate() {
            out[c / pool] += u32::from(v);
        }
    }
    let denom = (pool * pool) as f64 * 255.0;
    Ok(sums.into_iter().map(|s| f64::from(s) / denom).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub pool_factor: usize,
    pub n_features: usize,
    /// Class-major: `weights[c * n_features + j]`.
    pub weights: Vec<f64>,
    pub bias: [f64; N_CLASSES],
    pub seed: u64,
}

/// Gradient of the mean cross-entropy, laid out like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: [f64; N_CLASSES],
}

impl BaselineModel {
    /// Fresh model with small seeded uniform weights and zero bias.
    pub fn new(n_features: usize, pool_factor: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let init = Uniform::new_inclusive(-INIT_SCALE, INIT_SCALE).expect("valid interval");
        BaselineModel {
            pool_factor,
            n_features,
            weights: (0..n_features * N_CLASSES).map(|_| init.sample(&mut r)).collect(),
            bias: [0.0; N_CLASSES],
            seed,
        }
    }

    pub fn zeros(n_features: usize, pool_factor: usize) -> Self {
        BaselineModel {
            pool_factor,
            n_features,
            weights: vec![0.0; n_features * N_CLASSES],
            bias: [0.0; N_CLASSES],
            seed: 0,
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + N_CLASSES
    }

    pub fn param(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        if i < self.weights.len() {
            self.weights[i] = v;
        } else {
            let n = self.weights.len();
            self.bias[i - n] = v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn check_dims(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::Learner(format!(
                "feature dimension {} does not match model dimension {}",
                x.len(),
                self.n_features
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<[f64; N_CLASSES]> {
        self.check_dims(x)?;
        let mut z = self.bias;
        for (c, zc) in z.iter_mut().enumerate() {
            let w = &self.weights[c * self.n_features..(c + 1) * self.n_features];
            *zc += w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(z)
    }

    /// Applies `params -= lr * grad`.
    pub fn step(&mut self, grad: &Gradient, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }
}

pub fn softmax(z: &[f64; N_CLASSES]) -> [f64; N_CLASSES] {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - max).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Class probability rows.
pub fn forward(model: &BaselineModel, batch: &[&[f64]]) -> Result<Vec<[f64; N_CLASSES]>> {
    batch.iter().map(|x| model.logits(x).map(|z| softmax(&z))).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &BaselineModel, batch: &[&[f64]]) -> Result<Vec<DefectLabel>> {
    Ok(forward(model, batch)?
        .iter()
        .map(|p| DefectLabel::from_index(argmax(p)).expect("three classes"))
        .collect())
}

/// Mean cross-entropy over `(features, class index)` pairs.
pub fn loss(model: &BaselineModel, batch: &[(&[f64], usize)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Learner("empty batch".into()));
    }
    let mut total = 0.0;
    for &(x, y) in batch {
        let z = model.logits(x)?;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    Ok(total / batch.len() as f64)
}

/// Mean cross-entropy and its analytic gradient: `(softmax - onehot) ⊗ x`, batch-averaged.
pub fn loss_and_grad(model: &BaselineModel, batch: &[(&[f64], usize)]) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(Error::Learner("empty batch".into()));
    }
    let d = model.n_features;
    let mut grad = Gradient {
        weights: vec![0.0; d * N_CLASSES],
        bias: [0.0; N_CLASSES],
    };
    let mut total = 0.0;
    for &(x, y) in batch {
        if y >= N_CLASSES {
            return Err(Error::Learner(format!("class index {y} out of range")));
        }
        let p = softmax(&model.logits(x)?);
        total -= p[y].max(f64::MIN_POSITIVE).ln();
        for c in 0..N_CLASSES {
            let delta = p[c] - if c == y { 1.0 } else { 0.0 };
            grad.bias[c] += delta;
            for (g, &xj) in grad.weights[c * d..(c + 1) * d].iter_mut().zip(x) {
                *g += delta * xj;
            }
        }
    }
    let n = batch.len() as f64;
    grad.weights.iter_mut().for_each(|g| *g /= n);
    grad.bias.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

/// Largest relative error between the analytic gradient and central finite differences.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(model: &BaselineModel, batch: &[(&[f64], usize)], eps: f64) -> Result<f64> {
    let (_, grad) = loss_and_grad(model, batch)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.n_params() {
        let orig = model.param(i);
        probe.set_param(i, orig + eps);
        let up = loss(&probe, batch)?;
        probe.set_param(i, orig - eps);
        let down = loss(&probe, batch)?;
        probe.set_param(i, orig);
        let numeric = (up - down) / (2.0 * eps);
        let analytic = if i < grad.weights.len() {
            grad.weights[i]
        } else {
            grad.bias[i - grad.weights.len()]
        };
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub draws: usize,
    pub max_relative_error: f64,
}

/// Gradient check over `draws` random models and batches.
///
/// Models have N(0, 0.5²)-ish weights, features are uniform in [0, 1]; dimensions and batch
/// sizes vary per draw, and the first draw uses the full 950-feature patch layout.
pub fn gradcheck_suite(draws: usize, seed: u64, eps: f64) -> Result<GradcheckSummary> {
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let mut r = rng::stream(seed, draw as u64);
        let dims = if draw == 0 { 950 } else { r.random_range(2..=64) };
        let batch_len = r.random_range(1..=16);
        let mut model = BaselineModel::zeros(dims, DEFAULT_POOL_FACTOR);
        for i in 0..model.n_params() {
            model.set_param(i, r.random_range(-1.0..1.0) * 0.5);
        }
        let xs: Vec<Vec<f64>> = (0..batch_len)
            .map(|_| (0..dims).map(|_| r.random::<f64>()).collect())
            .collect();
        let ys: Vec<usize> = (0..batch_len).map(|_| r.random_range(0..N_CLASSES)).collect();
        let batch: Vec<(&[f64], usize)> = xs.iter().map(Vec::as_slice).zip(ys).collect();
        worst = worst.max(gradient_check(&model, &batch, eps)?);
    }
    Ok(GradcheckSummary {
        draws,
        max_relative_error: worst,
    })
}

//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ibnl_core::data::Dataset;
use ibnl_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Batch norm from the definition: column mean, population variance, affine map.
pub fn scalar_bn(x: &[f64], m: usize, d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * d];
    for j in 0..d {
        let mut mu = 0.0;
        for i in 0..m {
            mu += x[i * d + j];
        }
        mu /= m as f64;
        let mut var = 0.0;
        for i in 0..m {
            var += (x[i * d + j] - mu) * (x[i * d + j] - mu);
        }
        var /= m as f64;
        for i in 0..m {
            out[i * d + j] = gamma[j] * (x[i * d + j] - mu) / (var + eps).sqrt() + beta[j];
        }
    }
    out
}

/// First index of the row maximum.
pub fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// ECE by scanning every bin `(k/B, (k+1)/B]` over every sample.
pub fn ece_oracle(probs: &[Vec<f64>], truths: &[usize], bins: usize) -> f64 {
    let n = probs.len() as f64;
    let mut total = 0.0;
    for k in 0..bins {
        let lo = k as f64 / bins as f64;
        let hi = (k + 1) as f64 / bins as f64;
        let mut count = 0.0;
        let mut hits = 0.0;
        let mut conf = 0.0;
        for (p, &t) in probs.iter().zip(truths) {
            let pred = first_argmax(p);
            let c = p[pred];
            if c > lo && c <= hi {
                count += 1.0;
                conf += c;
                if pred == t {
                    hits += 1.0;
                }
            }
        }
        if count > 0.0 {
            total += count / n * (hits / count - conf / count).abs();
        }
    }
    total
}

pub fn brier_oracle(probs: &[Vec<f64>], truths: &[usize]) -> f64 {
    let mut total = 0.0;
    for (p, &t) in probs.iter().zip(truths) {
        for (c, &v) in p.iter().enumerate() {
            let y = if c == t { 1.0 } else { 0.0 };
            total += (v - y) * (v - y);
        }
    }
    total / probs.len() as f64
}

/// `(tp, fp, fn, tn)` per class by testing every sample against every class.
pub fn confusion_oracle(pred: &[usize], truth: &[usize], classes: usize) -> Vec<[usize; 4]> {
    let mut out = vec![[0; 4]; classes];
    for (c, slot) in out.iter_mut().enumerate() {
        for i in 0..pred.len() {
            let idx = match (pred[i] == c, truth[i] == c) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            slot[idx] += 1;
        }
    }
    out
}

/// Random probability rows; some rows are pushed onto bin edges and ties.
pub fn synthetic_predictions(
    rng: &mut ChaCha8Rng,
    n: usize,
    c: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut probs = Vec::with_capacity(n);
    for i in 0..n {
        let row = match i % 7 {
            0 if c == 2 => {
                let edge = rng.random_range(5..=10) as f64 / 10.0;
                vec![edge, 1.0 - edge]
            }
            1 => vec![1.0 / c as f64; c],
            _ => {
                let sharp: f64 = rng.random_range(0.2..6.0);
                let raw: Vec<f64> = (0..c)
                    .map(|_| (rng.random_range(-1.0..1.0f64) * sharp).exp())
                    .collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            }
        };
        probs.push(row);
    }
    let truths = (0..n).map(|_| rng.random_range(0..c)).collect();
    (probs, truths)
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let c = rows[0].len();
    Tensor::from_vec(&[rows.len(), c], rows.concat()).unwrap()
}

/// 28×28 digit-like source: each label lights a distinct block of pixels
/// plus noise, so small models can separate classes.
pub fn synthetic_digits(per_class: usize, labels: &[usize], seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * labels.len();
    let mut images = Vec::with_capacity(n * 784);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let y = labels[i % labels.len()];
        for p in 0..784 {
            let (r, c) = (p / 28, p % 28);
            let on = (r / 7 + c / 7 * 4) % 10 == y;
            let base = if on { 0.8 } else { 0.1 };
            images.push((base + rng.random_range(-0.1..0.1f64)).clamp(0.0, 1.0));
        }
        ys.push(y);
    }
    Dataset {
        images: Tensor::from_vec(&[n, 1, 28, 28], images).unwrap(),
        labels: ys,
        class_names: (0..10).map(|d| d.to_string()).collect(),
        sample_ids: (0..n).collect(),
    }
}

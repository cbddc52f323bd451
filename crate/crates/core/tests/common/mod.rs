//! Oracles shared by the integration tests. Each one is written
//! independently of the library code it checks.
#![allow(dead_code)]

use oscxr::autodiff::{Tape, Tensor};
use oscxr::os_loss::{os_penalty, partition};
use rand::Rng;
use rand_distr::StandardNormal;

/// ECE and OE by scanning every bin over every sample.
pub fn brute_calibration(conf: &[f64], correct: &[bool], bins: usize) -> (f64, f64) {
    let n = conf.len() as f64;
    let (mut ece, mut oe) = (0.0, 0.0);
    for m in 0..bins {
        let lo = m as f64 / bins as f64;
        let hi = (m + 1) as f64 / bins as f64;
        let (mut count, mut hits, mut csum) = (0usize, 0usize, 0.0);
        for (i, &c) in conf.iter().enumerate() {
            let inside = if m == 0 { c <= hi } else { c > lo && c <= hi };
            if inside {
                count += 1;
                csum += c;
                if correct[i] {
                    hits += 1;
                }
            }
        }
        if count == 0 {
            continue;
        }
        let acc = hits as f64 / count as f64;
        let cf = csum / count as f64;
        ece += count as f64 / n * (acc - cf).abs();
        if cf > acc {
            oe += count as f64 / n * cf * (cf - acc);
        }
    }
    (ece, oe)
}

pub fn brute_brier(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        for (k, p) in row.iter().enumerate() {
            let d = if k == y { p - 1.0 } else { *p };
            s += d * d;
        }
    }
    s / probs.len() as f64
}

/// Random probability rows (softmax of Gaussian logits scaled by `temp`).
pub fn random_probs<R: Rng>(rng: &mut R, n: usize, k: usize, temp: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..k).map(|_| temp * rng.sample::<f64, _>(StandardNormal)).collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Penalty of the `k`-block partition of `features`, via the library.
pub fn penalty(features: &[f64], k: usize) -> f64 {
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(Tensor::from_f64(&[features.len()], features).unwrap());
    let fm = partition(&mut tape, f, k).unwrap();
    let p = os_penalty(&mut tape, &fm).unwrap();
    tape.value(p).item()
}

/// Direct `‖ZᵀZ − I‖²_F` with `Z` given as `k` columns.
pub fn penalty_of_columns(cols: &[Vec<f64>]) -> f64 {
    let k = cols.len();
    let mut s = 0.0;
    for a in 0..k {
        for b in 0..k {
            let dot: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            s += (dot - target).powi(2);
        }
    }
    s
}

pub fn gaussian_columns<R: Rng>(rng: &mut R, d: usize, k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Modified Gram-Schmidt; columns must be linearly independent.
pub fn gram_schmidt(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    for c in cols {
        let mut v = c.clone();
        for q in &out {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= dot * qi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push(v.iter().map(|x| x / norm).collect());
    }
    out
}

/// Concatenates columns into the flat feature vector the partition reads.
pub fn flatten_columns(cols: &[Vec<f64>]) -> Vec<f64> {
    cols.iter().flatten().cloned().collect()
}

/// Applies the `d × d` row-major matrix `q` to each column.
pub fn left_multiply(q: &[f64], cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = cols[0].len();
    cols.iter()
        .map(|c| (0..d).map(|i| (0..d).map(|j| q[i * d + j] * c[j]).sum()).collect())
        .collect()
}

/// Random orthogonal `d × d` matrix (row-major) from Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let q = gram_schmidt(&gaussian_columns(rng, d, d));
    let mut m = vec![0.0; d * d];
    for (j, col) in q.iter().enumerate() {
        for i in 0..d {
            m[i * d + j] = col[i];
        }
    }
    m
}

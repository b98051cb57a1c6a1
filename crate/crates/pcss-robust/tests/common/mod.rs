//! Shared helpers for integration tests: central-difference gradient oracle
//! and small random-instance builders.

#![allow(dead_code)]

pub mod gradcheck;

use pcss_robust::Arr;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Finite-difference step used by the gradient checks.
pub const FD_H: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn central_diff(mut f: impl FnMut(&Arr) -> f64, x: &Arr, h: f64) -> Arr {
    let mut g = Arr::zeros(&x.shape);
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = x.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        g.data[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Worst elementwise deviation, relative to the larger gradient magnitude.
pub fn rel_err(analytic: &Arr, numeric: &Arr) -> f64 {
    assert_eq!(analytic.shape, numeric.shape, "gradient shape mismatch");
    let scale = analytic
        .data
        .iter()
        .chain(&numeric.data)
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0f64, f64::max)
        / scale
}

/// Uniform random matrix in [-range, range].
pub fn rand_arr(rng: &mut ChaCha8Rng, rows: usize, cols: usize, range: f64) -> Arr {
    Arr {
        shape: vec![rows, cols],
        data: (0..rows * cols).map(|_| rng.gen_range(-range..range)).collect(),
    }
}

/// Random labels in [0, classes).
pub fn rand_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

/// Row-softmax applied off-tape (valid probability rows for loss inputs).
pub fn softmax_rows(logits: &Arr) -> Arr {
    let (n, c) = logits.dims2();
    let mut out = logits.clone();
    for r in 0..n {
        let row = &mut out.data[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#![allow(dead_code)]

use lowrank_core::faer::Mat;
use lowrank_core::{ActivationBatch, WeightMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Mat<f64> {
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            out[(i, j)] = StandardNormal.sample(rng);
        }
    }
    out
}

pub fn problem(seed: u64, l: usize, m: usize, n: usize) -> (ActivationBatch, WeightMatrix) {
    let mut r = rng(seed);
    let x = ActivationBatch::new(gaussian(&mut r, l, m)).unwrap();
    let w = WeightMatrix::new("w", gaussian(&mut r, m, n)).unwrap();
    (x, w)
}

/// `YᵀY` by the textbook triple loop.
pub fn naive_gram(y: &Mat<f64>) -> Mat<f64> {
    let n = y.ncols();
    let mut g = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..y.nrows() {
                s += y[(t, i)] * y[(t, j)];
            }
            g[(i, j)] = s;
        }
    }
    g
}

pub fn naive_matmul(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    for i in 0..a.nrows() {
        for p in 0..a.ncols() {
            let v = a[(i, p)];
            for j in 0..b.ncols() {
                out[(i, j)] += v * b[(p, j)];
            }
        }
    }
    out
}

pub fn fro(m: &Mat<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            s += m[(i, j)] * m[(i, j)];
        }
    }
    s.sqrt()
}

pub fn fro_diff(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    fro(&(a - b))
}

//! Brute-force reference for the minimal truncation loss.
//!
//! Singular values are computed directly from the explicit product `Y = XW`:
//! Householder bidiagonalization, then Sturm-count bisection on the
//! Golub–Kahan tridiagonal `[[0, B], [Bᵀ, 0]]`, whose eigenvalues are `±σ_i`.
//! Nothing here touches the covariance accumulator or an eigensolver, so the
//! result is an independent check on the spectral route.

use alloc::vec;
use alloc::vec::Vec;

use faer::MatRef;

use crate::spectral::{ActivationBatch, WeightMatrix};
use crate::{Error, Result};

/// Singular values of `a` in descending order (`min(m, n)` of them).
pub fn singular_values(a: MatRef<'_, f64>) -> Result<Vec<f64>> {
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Ok(Vec::new());
    }
    if !crate::dense::all_finite(a) {
        return Err(Error::NonFinite("oracle input"));
    }
    // Work on the tall orientation; singular values are transpose-invariant.
    let (rows, cols, buf) = if m >= n {
        (m, n, row_major(a))
    } else {
        (n, m, row_major(a.transpose()))
    };
    let (d, e) = bidiagonalize(rows, cols, buf);
    let mut sigma = bidiagonal_singular_values(&d, &e);
    sigma.sort_by(|x, y| y.total_cmp(x));
    Ok(sigma)
}

/// `(Σ_{j>k} σ_j²)^{1/2}` from a full direct SVD of `y`.
pub fn oracle_loss_from_output(y: MatRef<'_, f64>, k: usize) -> Result<f64> {
    let max = y.nrows().min(y.ncols());
    if k > max {
        return Err(Error::RankOutOfRange { k, min: 0, max });
    }
    let sigma = singular_values(y)?;
    Ok(trailing_norm(&sigma, k))
}

/// Minimal rank-`k` loss `min ‖XW − XW_k‖_F` computed from the explicit
/// product.
pub fn oracle_loss(x: &ActivationBatch, w: &WeightMatrix, k: usize) -> Result<f64> {
    if x.width() != w.rows() {
        return Err(Error::ShapeMismatch {
            context: "oracle activations vs weight",
            left: (x.rows(), x.width()),
            right: w.shape(),
        });
    }
    let y = x.matrix() * w.matrix();
    oracle_loss_from_output(y.as_ref(), k)
}

/// Square root of the sum of squares of `sigma[k..]` (descending input),
/// summed from the smallest term.
pub fn trailing_norm(sigma: &[f64], k: usize) -> f64 {
    let tail: f64 = sigma[k.min(sigma.len())..]
        .iter()
        .rev()
        .map(|s| s * s)
        .sum();
    libm::sqrt(tail)
}

fn row_major(a: MatRef<'_, f64>) -> Vec<f64> {
    let (m, n) = (a.nrows(), a.ncols());
    let mut out = vec![0.0; m * n];
    for j in 0..n {
        for i in 0..m {
            out[i * n + j] = a[(i, j)];
        }
    }
    out
}

fn norm2(x: &[f64]) -> f64 {
    let ss = dot(x, x);
    if ss.is_finite() && ss > f64::MIN_POSITIVE {
        return libm::sqrt(ss);
    }
    let scale = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let s: f64 = x.iter().map(|v| (v / scale) * (v / scale)).sum();
    scale * libm::sqrt(s)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ac, ar) = a.split_at(a.len() - a.len() % 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Householder vector for `x`: returns `(alpha, beta)` and overwrites `x`
/// with `v` such that `(I − beta·v·vᵀ)·x = alpha·e₁`.
fn householder(x: &mut [f64]) -> (f64, f64) {
    let s = norm2(x);
    if s == 0.0 {
        return (0.0, 0.0);
    }
    let x0 = x[0];
    let alpha = if x0 >= 0.0 { -s } else { s };
    x[0] = x0 - alpha;
    let vtv = 2.0 * s * (s + x0.abs());
    (alpha, 2.0 / vtv)
}

/// Reduces the row-major `rows × cols` matrix (`rows ≥ cols`) to upper
/// bidiagonal form; returns the diagonal and superdiagonal.
///
/// Each step makes two passes over the trailing block: one to form `vᵀA` for
/// the left reflector, one that applies it and, row by row, the right
/// reflector built from the freshly updated pivot row.
fn bidiagonalize(rows: usize, cols: usize, mut a: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut d = vec![0.0; cols];
    let mut e = vec![0.0; cols.saturating_sub(1)];
    let mut vl = vec![0.0; rows];
    let mut w = vec![0.0; cols];
    let mut vr = vec![0.0; cols];

    for k in 0..cols {
        let len = rows - k;
        for (i, slot) in vl[..len].iter_mut().enumerate() {
            *slot = a[(k + i) * cols + k];
        }
        let (alpha_l, beta_l) = householder(&mut vl[..len]);
        d[k] = alpha_l;

        let tail = cols - k - 1;
        if tail == 0 {
            break;
        }
        let lo = k + 1;

        // w = vᵀ A[k.., k+1..]
        let w = &mut w[..tail];
        w.iter_mut().for_each(|x| *x = 0.0);
        if beta_l != 0.0 {
            for (i, &vi) in vl.iter().enumerate().take(len) {
                if vi != 0.0 {
                    let r = (k + i) * cols;
                    axpy(vi, &a[r + lo..r + cols], w);
                }
            }
        }

        // Pivot row: left update, then its right reflector.
        let r = k * cols;
        if beta_l != 0.0 {
            axpy(-beta_l * vl[0], w, &mut a[r + lo..r + cols]);
        }
        let vr = &mut vr[..tail];
        vr.copy_from_slice(&a[r + lo..r + cols]);
        let (alpha_r, beta_r) = if tail > 1 {
            householder(vr)
        } else {
            (vr[0], 0.0)
        };
        e[k] = alpha_r;

        for i in 1..len {
            let row = &mut a[(k + i) * cols + lo..(k + i) * cols + cols];
            if beta_l != 0.0 {
                axpy(-beta_l * vl[i], w, row);
            }
            if beta_r != 0.0 {
                let t = dot(row, vr);
                axpy(-beta_r * t, vr, row);
            }
        }
    }
    (d, e)
}

const LANES: usize = 8;

/// Singular values of the upper bidiagonal `(d, e)` by bisection on the
/// Golub–Kahan tridiagonal with zero diagonal and off-diagonal
/// `d₀, e₀, d₁, e₁, …, d_{n−1}`.
fn bidiagonal_singular_values(d: &[f64], e: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut off = Vec::with_capacity(2 * n - 1);
    for i in 0..n {
        off.push(d[i]);
        if i < e.len() {
            off.push(e[i]);
        }
    }
    let off2: Vec<f64> = off.iter().map(|v| v * v).collect();
    let max_off2 = off2.iter().fold(0.0f64, |a, &b| a.max(b));
    if max_off2 == 0.0 {
        return vec![0.0; n];
    }
    let pivmin = f64::MIN_POSITIVE * max_off2.max(1.0);

    let mut bound = 0.0f64;
    for i in 0..2 * n {
        let left = if i > 0 { off[i - 1].abs() } else { 0.0 };
        let right = if i < off.len() { off[i].abs() } else { 0.0 };
        bound = bound.max(left + right);
    }
    bound *= 1.0 + 4.0 * f64::EPSILON;
    let tol = 2.0 * f64::EPSILON * bound;

    // Target t is the t-th smallest singular value.
    let mut out = vec![0.0; n];
    let mut t0 = 0;
    while t0 < n {
        let lanes = LANES.min(n - t0);
        let mut lo = [0.0f64; LANES];
        let mut hi = [bound; LANES];
        loop {
            let mut active = false;
            let mut mid = [0.0f64; LANES];
            for l in 0..lanes {
                mid[l] = 0.5 * (lo[l] + hi[l]);
                if hi[l] - lo[l] > tol && mid[l] > lo[l] && mid[l] < hi[l] {
                    active = true;
                }
            }
            if !active {
                break;
            }
            let below = count_below(&off2, pivmin, &mid, lanes);
            for l in 0..lanes {
                // Eigenvalues below a positive shift: all n of −σ plus σ < x.
                let sigma_below = below[l] - n;
                if sigma_below <= t0 + l {
                    lo[l] = mid[l];
                } else {
                    hi[l] = mid[l];
                }
            }
        }
        for l in 0..lanes {
            out[t0 + l] = 0.5 * (lo[l] + hi[l]);
        }
        t0 += lanes;
    }
    out
}

/// Sturm counts (eigenvalues strictly below each shift) for several shifts
/// at once; the lanes are independent recurrences.
fn count_below(off2: &[f64], pivmin: f64, shifts: &[f64; LANES], lanes: usize) -> [usize; LANES] {
    let mut q = [0.0f64; LANES];
    let mut count = [0usize; LANES];
    for l in 0..LANES {
        let x = if l < lanes { shifts[l] } else { shifts[0] };
        q[l] = -x;
        if q[l].abs() < pivmin {
            q[l] = -pivmin;
        }
        count[l] = (q[l] < 0.0) as usize;
    }
    for &b2 in off2 {
        for l in 0..LANES {
            let x = if l < lanes { shifts[l] } else { shifts[0] };
            let mut v = -x - b2 / q[l];
            if v.abs() < pivmin {
                v = -pivmin;
            }
            q[l] = v;
            count[l] += (v < 0.0) as usize;
        }
    }
    count
}

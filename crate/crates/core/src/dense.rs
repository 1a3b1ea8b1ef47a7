//! Small dense helpers shared across modules.

use faer::{Mat, MatRef};

pub fn all_finite(m: MatRef<'_, f64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| m[(i, j)].is_finite()))
}

/// Frobenius norm with a scaled sum to avoid overflow.
pub fn frobenius(m: MatRef<'_, f64>) -> f64 {
    let mut scale = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            scale = scale.max(m[(i, j)].abs());
        }
    }
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let mut sum = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[(i, j)] / scale;
            sum += v * v;
        }
    }
    scale * libm::sqrt(sum)
}

/// `‖a − b‖_F` for equally shaped matrices.
pub fn frobenius_distance(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    debug_assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let diff = Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] - b[(i, j)]);
    frobenius(diff.as_ref())
}

pub fn max_abs(m: MatRef<'_, f64>) -> f64 {
    let mut out = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            out = out.max(m[(i, j)].abs());
        }
    }
    out
}

/// Row-major copy of a matrix.
pub fn to_row_major(m: MatRef<'_, f64>) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec::Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, values: &[f64]) -> Mat<f64> {
    assert_eq!(values.len(), rows * cols, "row-major buffer length");
    Mat::from_fn(rows, cols, |i, j| values[i * cols + j])
}

/// Rounds every entry through `f32`, simulating 32-bit source storage.
pub fn round_to_f32(m: MatRef<'_, f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] as f32 as f64)
}

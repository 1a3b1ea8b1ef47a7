//! Cholesky-whitening comparator.
//!
//! Factor `XᵀX = SᵀS` (upper `S`), take the truncated SVD of `S·W`, and map
//! back with `S⁻¹`. In exact arithmetic this reaches the same minimum as the
//! spectral route; in finite precision it inherits the conditioning of
//! `XᵀX`, most visibly when `S⁻¹` is formed explicitly. The whole pipeline
//! runs in the requested working precision; the resulting factors are
//! promoted to `f64` for evaluation.

use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::solve_upper_triangular_in_place;
use faer::traits::ComplexField;
use faer::{Accum, Mat, MatRef, Par, Side};

use crate::spectral::{ActivationBatch, LowRankFactors, WeightMatrix};
use crate::{Error, Result};

/// Relative diagonal jitter (times `trace/m`) added after a failed Cholesky.
pub const JITTER_SCALE: f64 = 1e-8;

/// Floating-point type the comparator computes in.
pub trait WorkingPrecision: ComplexField<Real = Self> + Copy {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl WorkingPrecision for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl WorkingPrecision for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// How `S⁻¹` is applied to the truncated left factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InverseMode {
    /// Form `S⁻¹` and multiply.
    #[default]
    Explicit,
    /// Triangular solve against `S`.
    Solve,
}

#[derive(Debug, Clone)]
pub struct WhiteningOutcome {
    pub factors: LowRankFactors,
    /// Diagonal jitter that had to be added to `XᵀX`, if any.
    pub jitter: Option<f64>,
}

fn cast<T: WorkingPrecision>(m: MatRef<'_, f64>) -> Mat<T> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| T::from_f64(m[(i, j)]))
}

fn promote<T: WorkingPrecision>(m: MatRef<'_, T>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)].to_f64())
}

/// Rank-`k` factors from the whitening pipeline computed in precision `T`
/// with an explicit `S⁻¹`.
pub fn whitening_factors<T: WorkingPrecision>(
    x: &ActivationBatch,
    w: &WeightMatrix,
    k: usize,
) -> Result<WhiteningOutcome> {
    whitening_factors_with::<T>(x, w, k, InverseMode::Explicit)
}

pub fn whitening_factors_with<T: WorkingPrecision>(
    x: &ActivationBatch,
    w: &WeightMatrix,
    k: usize,
    mode: InverseMode,
) -> Result<WhiteningOutcome> {
    let (m, n) = w.shape();
    if x.width() != m {
        return Err(Error::ShapeMismatch {
            context: "whitening activations vs weight",
            left: (x.rows(), x.width()),
            right: w.shape(),
        });
    }
    let max = m.min(n);
    if k == 0 || k > max {
        return Err(Error::RankOutOfRange { k, min: 1, max });
    }

    let xt: Mat<T> = cast(x.matrix());
    let wt: Mat<T> = cast(w.matrix());
    let mut gram = Mat::<T>::zeros(m, m);
    matmul(
        gram.as_mut(),
        Accum::Replace,
        xt.transpose(),
        xt.as_ref(),
        T::from_f64(1.0),
        Par::Seq,
    );

    let mut jitter = None;
    let lower = match gram.llt(Side::Lower) {
        Ok(llt) => llt.L().to_owned(),
        Err(_) => {
            let trace: f64 = (0..m).map(|i| gram[(i, i)].to_f64()).sum();
            let eps = JITTER_SCALE * trace / m as f64;
            for i in 0..m {
                gram[(i, i)] = T::from_f64(gram[(i, i)].to_f64() + eps);
            }
            jitter = Some(eps);
            match gram.llt(Side::Lower) {
                Ok(llt) => llt.L().to_owned(),
                Err(_) => return Err(Error::NotPositiveDefinite { jitter: eps }),
            }
        }
    };
    let s = lower.transpose().to_owned();

    let mut sw = Mat::<T>::zeros(m, n);
    matmul(
        sw.as_mut(),
        Accum::Replace,
        s.as_ref(),
        wt.as_ref(),
        T::from_f64(1.0),
        Par::Seq,
    );
    let svd = sw.thin_svd().map_err(|_| Error::SvdNoConvergence)?;
    let u = svd.U();
    let sigma = svd.S().column_vector();
    let v = svd.V();

    let mut a = Mat::<T>::from_fn(m, k, |i, j| u[(i, j)] * sigma[j]);
    match mode {
        InverseMode::Solve => solve_upper_triangular_in_place(s.as_ref(), a.as_mut(), Par::Seq),
        InverseMode::Explicit => {
            let mut inv = Mat::<T>::identity(m, m);
            solve_upper_triangular_in_place(s.as_ref(), inv.as_mut(), Par::Seq);
            let us = a;
            a = Mat::<T>::zeros(m, k);
            matmul(
                a.as_mut(),
                Accum::Replace,
                inv.as_ref(),
                us.as_ref(),
                T::from_f64(1.0),
                Par::Seq,
            );
        }
    }
    let b = Mat::<T>::from_fn(k, n, |i, j| v[(j, i)]);

    let factors =
        LowRankFactors::new(w.name(), promote(a.as_ref()), promote(b.as_ref())).map_err(|_| {
            Error::NotPositiveDefinite {
                jitter: jitter.unwrap_or(0.0),
            }
        })?;
    Ok(WhiteningOutcome { factors, jitter })
}

/// `‖XW − (X·A)·B‖_F` in `f64` for any factor pair.
pub fn factor_residual(x: &ActivationBatch, y: MatRef<'_, f64>, f: &LowRankFactors) -> Result<f64> {
    let approx = f.apply(x.matrix())?;
    if (approx.nrows(), approx.ncols()) != (y.nrows(), y.ncols()) {
        return Err(Error::ShapeMismatch {
            context: "reconstruction vs outputs",
            left: (approx.nrows(), approx.ncols()),
            right: (y.nrows(), y.ncols()),
        });
    }
    Ok(crate::dense::frobenius_distance(y, approx.as_ref()))
}

/// Whitening loss and any jitter applied, computed in precision `T`.
pub fn whitening_loss<T: WorkingPrecision>(
    x: &ActivationBatch,
    w: &WeightMatrix,
    k: usize,
) -> Result<(f64, Option<f64>)> {
    let outcome = whitening_factors::<T>(x, w, k)?;
    let y = x.matrix() * w.matrix();
    let loss = factor_residual(x, y.as_ref(), &outcome.factors)?;
    Ok((loss, outcome.jitter))
}

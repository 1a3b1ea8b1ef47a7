//! Output-covariance spectra and the optimal activation-aware factors derived
//! from them.
//!
//! The right singular vectors `V` and singular values `σ` of `Y = XW` are the
//! eigenpairs of `YᵀY = V Σ² Vᵀ`, so streaming `YᵀY` over calibration rows and
//! decomposing it once yields, for every rank `k`, both the optimal weight
//! `W V_k V_kᵀ` and its loss `(Σ_{j>k} σ_j²)^{1/2}`.

use alloc::string::String;
use alloc::vec::Vec;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par, Side};

use crate::dense::{all_finite, frobenius};
use crate::{Error, Result};

/// Relative threshold (against `σ₁`) below which a singular value is treated
/// as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Rows per block when streaming activations through a weight.
pub const DEFAULT_BLOCK_ROWS: usize = 256;

/// A dense `m × n` weight mapping `m` input features to `n` outputs.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    name: String,
    data: Mat<f64>,
}

impl WeightMatrix {
    pub fn new(name: impl Into<String>, data: Mat<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Empty("weight matrix"));
        }
        if !all_finite(data.as_ref()) {
            return Err(Error::NonFinite("weight matrix"));
        }
        Ok(Self {
            name: name.into(),
            data,
        })
    }

    pub fn from_row_major(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: &[f64],
    ) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "weight buffer",
                left: (rows, cols),
                right: (values.len(), 1),
            });
        }
        Self::new(name, crate::dense::from_row_major(rows, cols, values))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn matrix(&self) -> MatRef<'_, f64> {
        self.data.as_ref()
    }

    pub fn parameter_count(&self) -> usize {
        self.rows() * self.cols()
    }
}

/// A batch of activation vectors, one per row.
#[derive(Debug, Clone)]
pub struct ActivationBatch {
    data: Mat<f64>,
}

impl ActivationBatch {
    pub fn new(data: Mat<f64>) -> Result<Self> {
        if !all_finite(data.as_ref()) {
            return Err(Error::NonFinite("activation batch"));
        }
        Ok(Self { data })
    }

    pub fn from_row_major(rows: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * width {
            return Err(Error::ShapeMismatch {
                context: "activation buffer",
                left: (rows, width),
                right: (values.len(), 1),
            });
        }
        Self::new(crate::dense::from_row_major(rows, width, values))
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> MatRef<'_, f64> {
        self.data.as_ref()
    }

    pub fn into_matrix(self) -> Mat<f64> {
        self.data
    }
}

/// Streaming accumulator of the uncentered output second moment `C = YᵀY`.
///
/// `C` is always held in 64-bit regardless of the source precision. It is
/// additive over rows, so per-worker accumulators can be combined with
/// [`merge`](Self::merge).
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    gram: Mat<f64>,
    rows: u64,
    block_rows: usize,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            gram: Mat::zeros(dim, dim),
            rows: 0,
            block_rows: DEFAULT_BLOCK_ROWS,
        }
    }

    /// Rebuilds an accumulator from a stored Gram matrix.
    pub fn from_parts(gram: Mat<f64>, rows: u64) -> Result<Self> {
        if gram.nrows() != gram.ncols() {
            return Err(Error::ShapeMismatch {
                context: "covariance matrix",
                left: (gram.nrows(), gram.ncols()),
                right: (gram.ncols(), gram.nrows()),
            });
        }
        if !all_finite(gram.as_ref()) {
            return Err(Error::NonFinite("covariance matrix"));
        }
        Ok(Self {
            gram,
            rows,
            block_rows: DEFAULT_BLOCK_ROWS,
        })
    }

    pub fn with_block_rows(mut self, block_rows: usize) -> Self {
        self.block_rows = block_rows.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn row_count(&self) -> u64 {
        self.rows
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn gram(&self) -> MatRef<'_, f64> {
        self.gram.as_ref()
    }

    /// Adds `(XW)ᵀ(XW)`, streaming `X` in row blocks.
    pub fn accumulate(&mut self, x: &ActivationBatch, w: &WeightMatrix) -> Result<()> {
        if self.dim() != w.cols() {
            return Err(Error::ShapeMismatch {
                context: "accumulator vs weight",
                left: (self.dim(), self.dim()),
                right: w.shape(),
            });
        }
        if x.width() != w.rows() {
            return Err(Error::ShapeMismatch {
                context: "activations vs weight",
                left: (x.rows(), x.width()),
                right: w.shape(),
            });
        }
        let l = x.rows();
        let mut start = 0;
        while start < l {
            let len = self.block_rows.min(l - start);
            let xb = x.matrix().subrows(start, len);
            let mut yb = Mat::<f64>::zeros(len, w.cols());
            matmul(yb.as_mut(), Accum::Replace, xb, w.matrix(), 1.0, Par::Seq);
            self.add_outputs(yb.as_ref())?;
            start += len;
        }
        Ok(())
    }

    /// Adds `YᵀY` for outputs that were already computed (e.g. by a forward
    /// hook).
    pub fn accumulate_outputs(&mut self, y: MatRef<'_, f64>) -> Result<()> {
        if y.ncols() != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "accumulator vs outputs",
                left: (self.dim(), self.dim()),
                right: (y.nrows(), y.ncols()),
            });
        }
        let mut start = 0;
        while start < y.nrows() {
            let len = self.block_rows.min(y.nrows() - start);
            self.add_outputs(y.subrows(start, len))?;
            start += len;
        }
        Ok(())
    }

    fn add_outputs(&mut self, yb: MatRef<'_, f64>) -> Result<()> {
        if !all_finite(yb) {
            return Err(Error::NonFinite("layer outputs"));
        }
        matmul(
            self.gram.as_mut(),
            Accum::Add,
            yb.transpose(),
            yb,
            1.0,
            Par::Seq,
        );
        self.rows += yb.nrows() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &CovarianceAccumulator) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch {
                context: "accumulator merge",
                left: (self.dim(), self.dim()),
                right: (other.dim(), other.dim()),
            });
        }
        self.gram += &other.gram;
        self.rows += other.rows;
        Ok(())
    }

    pub fn merged(mut self, other: &CovarianceAccumulator) -> Result<Self> {
        self.merge(other)?;
        Ok(self)
    }

    /// Eigendecomposes the symmetrized `C` into a [`Spectrum`].
    ///
    /// Negative eigenvalues from roundoff are clamped to zero before the
    /// square root; only the leading `numerical_rank` directions are kept.
    pub fn decompose(&self, rank_tol: f64) -> Result<Spectrum> {
        if self.rows == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let n = self.dim();
        let g = self.gram.as_ref();
        let sym = Mat::from_fn(n, n, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]));
        if crate::dense::max_abs(sym.as_ref()) == 0.0 {
            return Ok(Spectrum {
                values: Vec::new(),
                vectors: Mat::zeros(n, 0),
            });
        }
        let evd = sym
            .self_adjoint_eigen(Side::Lower)
            .map_err(|_| Error::EigenNoConvergence)?;
        let eig = evd.S().column_vector();
        let u = evd.U();
        // faer returns ascending eigenvalues.
        let sigma: Vec<f64> = (0..n).rev().map(|i| libm::sqrt(eig[i].max(0.0))).collect();
        let cutoff = rank_tol * sigma[0];
        let rank = sigma.iter().take_while(|&&s| s > cutoff).count();
        let vectors = Mat::from_fn(n, rank, |i, j| u[(i, n - 1 - j)]);
        let mut values = sigma;
        values.truncate(rank);
        Ok(Spectrum { values, vectors })
    }
}

/// Singular values (descending) and orthonormal right singular vectors of a
/// layer output, truncated at its numerical rank.
#[derive(Debug, Clone)]
pub struct Spectrum {
    values: Vec<f64>,
    vectors: Mat<f64>,
}

impl Spectrum {
    /// Builds a spectrum from bare singular values with coordinate-axis
    /// vectors. Values at or below `DEFAULT_RANK_TOL · σ₁` are dropped.
    pub fn from_singular_values(values: &[f64]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("singular values"));
        }
        if values.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::config("singular values", "must be non-increasing"));
        }
        let dim = values.len();
        let cutoff = values.first().map_or(0.0, |s| s * DEFAULT_RANK_TOL);
        let rank = values.iter().take_while(|&&s| s > cutoff).count();
        Ok(Self {
            values: values[..rank].to_vec(),
            vectors: Mat::from_fn(dim, rank, |i, j| if i == j { 1.0 } else { 0.0 }),
        })
    }

    /// Rebuilds a stored spectrum. `values` must be positive and
    /// non-increasing with one column of `vectors` each.
    pub fn from_parts(values: Vec<f64>, vectors: Mat<f64>) -> Result<Self> {
        if values.len() != vectors.ncols() {
            return Err(Error::ShapeMismatch {
                context: "singular values vs vectors",
                left: (values.len(), 1),
                right: (vectors.nrows(), vectors.ncols()),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v <= 0.0) || !all_finite(vectors.as_ref()) {
            return Err(Error::NonFinite("stored spectrum"));
        }
        if values.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::config("singular values", "must be non-increasing"));
        }
        Ok(Self { values, vectors })
    }

    /// Row dimension of `V`, i.e. the output width `n` of the source weight.
    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn numerical_rank(&self) -> usize {
        self.values.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.values
    }

    pub fn right_vectors(&self) -> MatRef<'_, f64> {
        self.vectors.as_ref()
    }

    /// `ε*_k = (Σ_{j>k} σ_j²)^{1/2}` for `0 ≤ k ≤ numerical_rank`.
    pub fn loss_at(&self, k: usize) -> Result<f64> {
        let r = self.numerical_rank();
        if k > r {
            return Err(Error::RankOutOfRange { k, min: 0, max: r });
        }
        let tail: f64 = self.values[k..].iter().rev().map(|s| s * s).sum();
        Ok(libm::sqrt(tail))
    }

    /// `[ε*_0, …, ε*_r]` from one reverse cumulative sum.
    pub fn loss_spectrum(&self) -> Vec<f64> {
        let r = self.numerical_rank();
        let mut out = alloc::vec![0.0; r + 1];
        let mut tail = 0.0;
        for k in (0..r).rev() {
            tail += self.values[k] * self.values[k];
            out[k] = libm::sqrt(tail);
        }
        out
    }

    /// `exp(−Σ p_i ln p_i)` with `p_i = σ_i / Σσ_j`.
    pub fn effective_rank(&self) -> Result<f64> {
        let total: f64 = self.values.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::UndefinedEffectiveRank);
        }
        let entropy: f64 = self
            .values
            .iter()
            .map(|s| s / total)
            .filter(|&p| p > 0.0)
            .map(|p| -p * libm::log(p))
            .sum();
        let r = self.numerical_rank() as f64;
        Ok(libm::exp(entropy).clamp(1.0, r))
    }
}

/// The factor pair `A = W·V_k`, `B = V_kᵀ` replacing an `m × n` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    source: String,
    a: Mat<f64>,
    b: Mat<f64>,
}

impl LowRankFactors {
    pub fn new(source: impl Into<String>, a: Mat<f64>, b: Mat<f64>) -> Result<Self> {
        if a.ncols() != b.nrows() {
            return Err(Error::ShapeMismatch {
                context: "factor inner dimension",
                left: (a.nrows(), a.ncols()),
                right: (b.nrows(), b.ncols()),
            });
        }
        if a.ncols() == 0 {
            return Err(Error::RankOutOfRange {
                k: 0,
                min: 1,
                max: b.ncols().min(a.nrows()),
            });
        }
        if a.nrows() == 0 || b.ncols() == 0 {
            return Err(Error::Empty("factor"));
        }
        if !all_finite(a.as_ref()) || !all_finite(b.as_ref()) {
            return Err(Error::NonFinite("factors"));
        }
        Ok(Self {
            source: source.into(),
            a,
            b,
        })
    }

    pub fn source_name(&self) -> &str {
        &self.source
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> MatRef<'_, f64> {
        self.a.as_ref()
    }

    pub fn b(&self) -> MatRef<'_, f64> {
        self.b.as_ref()
    }

    /// `k·(m+n)`.
    pub fn parameter_count(&self) -> usize {
        self.rank() * (self.rows() + self.cols())
    }

    /// True when the factors store fewer entries than the dense weight.
    pub fn compresses(&self) -> bool {
        self.parameter_count() < self.rows() * self.cols()
    }

    /// Width of the cached latent `X·A`.
    pub fn cache_width(&self) -> usize {
        self.rank()
    }

    pub fn reconstruct(&self) -> Mat<f64> {
        &self.a * &self.b
    }

    /// The latent `X·A`.
    pub fn latent(&self, x: MatRef<'_, f64>) -> Result<Mat<f64>> {
        if x.ncols() != self.rows() {
            return Err(Error::ShapeMismatch {
                context: "activations vs factor A",
                left: (x.nrows(), x.ncols()),
                right: (self.a.nrows(), self.a.ncols()),
            });
        }
        Ok(x * &self.a)
    }

    /// `(X·A)·B` without materializing `A·B`.
    pub fn apply(&self, x: MatRef<'_, f64>) -> Result<Mat<f64>> {
        Ok(&self.latent(x)? * &self.b)
    }
}

/// The rank-`k` factors `A = W·V_k`, `B = V_kᵀ` minimizing `‖XW − XAB‖_F`.
///
/// `k` must lie in `1..=numerical_rank`; larger requests are rejected rather
/// than silently capped so that upstream budget accounting stays exact.
pub fn optimal_factors(
    weight: &WeightMatrix,
    spectrum: &Spectrum,
    k: usize,
) -> Result<LowRankFactors> {
    if spectrum.dim() != weight.cols() {
        return Err(Error::ShapeMismatch {
            context: "spectrum vs weight",
            left: (spectrum.dim(), spectrum.numerical_rank()),
            right: weight.shape(),
        });
    }
    let r = spectrum.numerical_rank();
    if k == 0 {
        return Err(Error::RankOutOfRange { k, min: 1, max: r });
    }
    if k > r {
        return Err(Error::RankExceedsNumerical {
            k,
            numerical_rank: r,
        });
    }
    let vk = spectrum.right_vectors().subcols(0, k);
    let a = weight.matrix() * vk;
    let b = vk.transpose().to_owned();
    LowRankFactors::new(weight.name(), a, b)
}

/// `‖Y‖_F` recovered from the accumulator trace.
pub fn output_energy(acc: &CovarianceAccumulator) -> f64 {
    let g = acc.gram();
    let trace: f64 = (0..acc.dim()).map(|i| g[(i, i)]).sum();
    libm::sqrt(trace.max(0.0))
}

/// `‖Y − Y·V_k·V_kᵀ‖_F` evaluated explicitly.
pub fn projection_residual(y: MatRef<'_, f64>, spectrum: &Spectrum, k: usize) -> Result<f64> {
    if y.ncols() != spectrum.dim() {
        return Err(Error::ShapeMismatch {
            context: "outputs vs spectrum",
            left: (y.nrows(), y.ncols()),
            right: (spectrum.dim(), spectrum.numerical_rank()),
        });
    }
    let r = spectrum.numerical_rank();
    if k > r {
        return Err(Error::RankOutOfRange { k, min: 0, max: r });
    }
    let vk = spectrum.right_vectors().subcols(0, k);
    let proj = &(y * vk) * vk.transpose();
    let diff = y - &proj;
    Ok(frobenius(diff.as_ref()))
}

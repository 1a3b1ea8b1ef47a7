//! Activation-aware low-rank compression of dense weight matrices.
//!
//! Given calibration activations `X` and a weight `W`, the rank-`k` matrix
//! minimizing `‖XW − XW_k‖_F` is `W·V_k·V_kᵀ`, where `V_k` holds the top right
//! singular vectors of the output `Y = XW`. Those vectors (and the singular
//! values, hence every truncation loss) come from one symmetric
//! eigendecomposition of the streamed second moment `YᵀY`.
//!
//! The crate is `no_std` + `alloc`. Enable the `std` feature for faster
//! SIMD kernels inside `faer`.
//!
//! * [`spectral`]: covariance accumulation, spectra, optimal factors, losses.
//! * [`allocation`]: layer importance, sensitivity scores, budgeted rank
//!   allocation and candidate grid search.
//! * [`model`]: a toy layer stack with activation hooks, calibration,
//!   compression with a spectrum cache, and evaluation.
//! * [`oracle`] and [`whitening`]: an independent direct-SVD oracle and a
//!   Cholesky-whitening comparator used by the stability benchmark.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod allocation;
pub mod dense;
mod error;
pub mod model;
pub mod oracle;
pub mod spectral;
pub mod whitening;

pub use error::{Error, Result};
pub use faer;

pub use allocation::{AllocationConfig, AllocationLabel, LayerStats, MatrixId, RankAllocation};
pub use model::{
    Activation, CalibrationRun, CompressedBundle, Compressor, Layer, ModelBundle, ModelMetadata,
};
pub use spectral::{
    optimal_factors, ActivationBatch, CovarianceAccumulator, LowRankFactors, Spectrum, WeightMatrix,
};

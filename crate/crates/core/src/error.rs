use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} is incompatible with {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("rank {k} out of range (allowed {min}..={max})")]
    RankOutOfRange { k: usize, min: usize, max: usize },
    #[error("rank {k} exceeds numerical rank {numerical_rank}; cap the request before factoring")]
    RankExceedsNumerical { k: usize, numerical_rank: usize },
    #[error("symmetric eigendecomposition did not converge")]
    EigenNoConvergence,
    #[error("singular value decomposition did not converge")]
    SvdNoConvergence,
    #[error("effective rank is undefined for an all-zero spectrum")]
    UndefinedEffectiveRank,
    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("rank budget {budget} cannot give each of {matrices} matrices rank >= 1")]
    BudgetTooSmall { budget: usize, matrices: usize },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("calibration source exhausted after {got} of {needed} samples")]
    DataExhausted { needed: usize, got: usize },
    #[error("sample {sample}: {source}")]
    Sample {
        sample: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("covariance accumulator has not seen any rows")]
    EmptyAccumulator,
    #[error("matrix {matrix} has an all-zero output on the calibration data")]
    DegenerateOutput { matrix: String },
    #[error("Cholesky factorization failed (jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },
}

impl Error {
    pub(crate) fn in_layer(self, layer: usize) -> Self {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
}

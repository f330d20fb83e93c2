//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix that must be positive definite is not (a Cholesky pivot
    /// was at or below the tolerance). Callers usually dampen and retry.
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    /// Shapes of two operands do not agree.
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    /// Iterative eigensolver failed to converge.
    #[error("eigenvalue iteration did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    /// A variance argument was negative.
    #[error("negative variance: {0}")]
    NegativeVariance(f64),

    /// A pairwise difference variance s_k^2 + s_i^2 - 2 s_ik was negative
    /// beyond roundoff, which no valid covariance can produce.
    #[error("negative difference variance {value:.3e} for class pair ({k}, {i})")]
    NegativeDifferenceVariance { k: usize, i: usize, value: f64 },

    /// Renormalization got a vector with (near-)zero total mass.
    #[error("cannot renormalize: total mass {0:.3e} is not positive")]
    ZeroMass(f64),

    /// An operation that consumes samples got an empty batch.
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    /// Training loss became non-finite.
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    /// A metric got an empty input.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Two paired inputs have different lengths.
    #[error("length mismatch: {left} vs {right} ({context})")]
    LengthMismatch {
        left: usize,
        right: usize,
        context: &'static str,
    },

    /// Stratified splitting is impossible with the given class counts.
    #[error("class {class} has {count} samples, too few for stratified splitting")]
    InsufficientSamples { class: usize, count: usize },

    /// The held-out split needed for tuning is empty.
    #[error("held-out split is empty")]
    EmptyHeldout,

    /// An IDX file does not start with the expected magic number.
    #[error("bad IDX magic 0x{got:08x} in {path} (expected 0x{expected:08x})")]
    BadMagic {
        path: String,
        got: u32,
        expected: u32,
    },

    /// An IDX file ends before its declared payload.
    #[error("truncated IDX file {path}: need {needed} bytes, have {have}")]
    TruncatedFile {
        path: String,
        needed: usize,
        have: usize,
    },

    /// Image and label files disagree on the number of samples.
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    /// The curvature cache was built from a different checkpoint.
    #[error("stale curvature: cache built for checkpoint {cached}, model is {actual}")]
    StaleCurvature { cached: String, actual: String },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Malformed data file (CSV dump, checkpoint, cache).
    #[error("bad data in {path}: {reason}")]
    BadData { path: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

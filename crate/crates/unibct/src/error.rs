//! Crate-wide error type. Every fallible operation returns [`Result`].

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of the pipeline, from config validation down to numerics.
#[derive(Error, Debug)]
pub enum Error {
    /// A configuration field failed validation. `field` names the offender.
    #[error("invalid config: field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },

    /// Matrix or batch dimensions disagree with what the operation expects.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A split could not be allocated (fraction too small, class exhausted).
    #[error("split allocation failed: {0}")]
    Allocation(String),

    /// A label has no row in the prototype matrix it is scored against.
    #[error("label {label} has no prototype row (classifier covers {covered} classes)")]
    LabelCoverage { label: usize, covered: usize },

    /// The requested loss cannot run on this split (e.g. BCT on open classes).
    #[error("loss inapplicable: {0}")]
    Inapplicable(String),

    /// A batch violates a loss precondition (e.g. contrastive with one class).
    #[error("bad batch composition: {0}")]
    BatchComposition(String),

    /// NaN/Inf encountered, or a linear system too ill-conditioned to trust.
    #[error("numerical failure in {context}: {message}")]
    Numerical { context: String, message: String },

    /// A pooled vector collapsed to (near) zero and cannot be normalized.
    #[error("near-zero vector in {context}: norm {norm:.3e} below 1e-8")]
    NearZeroVector { context: String, norm: f64 },

    /// The operation needs generator provenance the dataset does not carry
    /// (it was imported rather than produced by `generate_dataset`).
    #[error("{context} requires a dataset produced by generate_dataset")]
    MissingProvenance { context: String },

    /// A checkpoint or export file is malformed.
    #[error("bad file format: {0}")]
    FileFormat(String),

    /// An error that occurred inside a specific training epoch.
    #[error("epoch {epoch}: {source}")]
    InEpoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the epoch it happened in.
    pub fn in_epoch(self, epoch: usize) -> Self {
        Error::InEpoch {
            epoch,
            source: Box::new(self),
        }
    }

    /// Shorthand for [`Error::InvalidConfig`].
    pub fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            message: message.into(),
        }
    }

    /// Shorthand for [`Error::Numerical`].
    pub fn numerical(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            message: message.into(),
        }
    }
}

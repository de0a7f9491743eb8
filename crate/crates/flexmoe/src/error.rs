//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants mirror the failure
//! categories of the public contracts (shape/argument/numeric/schema/...), so
//! callers — including the CLI, which prints one machine-readable line per
//! failure — can dispatch on the kind without parsing messages.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar argument is out of its documented range.
    #[error("argument error: {0}")]
    Argument(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input data does not match its declared schema (headers, dimensions).
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell or file could not be parsed; message carries the location.
    #[error("parse error: {0}")]
    Parse(String),

    /// Run configuration failed validation; message lists offending fields.
    #[error("config error: {0}")]
    Config(String),

    /// Fewer experts than modality combinations.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// The dataset cannot satisfy the split protocol.
    #[error("split error: {0}")]
    Split(String),

    /// A sample observes no modality at all.
    #[error("empty combo: {0}")]
    EmptyCombo(String),

    /// A bank cell that is never defined was requested.
    #[error("invalid lookup: {0}")]
    InvalidLookup(String),

    /// A metric is undefined for some class (no positives or no negatives).
    #[error("undefined class: {0}")]
    UndefinedClass(String),

    /// An analysis was requested over empty logs.
    #[error("empty report: {0}")]
    EmptyReport(String),

    /// A checkpoint file is malformed or from an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training hit a non-finite loss; message carries the diagnostic record.
    #[error("training aborted: {0}")]
    Aborted(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Error {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => Error::Parse(format!("{other:?}")),
            }
        } else {
            Error::Parse(e.to_string())
        }
    }
}

impl Error {
    /// Stable lowercase tag for machine-readable output (one per variant).
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Argument(_) => "argument",
            Error::Numeric(_) => "numeric",
            Error::Schema(_) => "schema",
            Error::Parse(_) => "parse",
            Error::Config(_) => "config",
            Error::Capacity(_) => "capacity",
            Error::Split(_) => "split",
            Error::EmptyCombo(_) => "empty-combo",
            Error::InvalidLookup(_) => "invalid-lookup",
            Error::UndefinedClass(_) => "undefined-class",
            Error::EmptyReport(_) => "empty-report",
            Error::Checkpoint(_) => "checkpoint",
            Error::Aborted(_) => "aborted",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

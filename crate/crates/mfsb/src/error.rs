//! Error taxonomy shared by every module.
//!
//! Config problems (bad keys, bad values, inconsistent settings) are kept
//! distinct from runtime problems so the CLI can map them to different exit
//! codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Dimension disagreement between two operands; names both shapes.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API was used outside its contract (non-scalar loss, duplicate
    /// parameter name, backward on a spent tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Class index out of range for a logit vector.
    #[error("target class {target} out of range for {n_classes} classes")]
    InvalidTarget { target: usize, n_classes: usize },

    /// Numerically meaningless input (zero-norm vector, empty context, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Non-finite values where finite ones are required.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// Invalid configuration (unknown key, unparsable or out-of-range value).
    #[error("config error: {0}")]
    Config(String),

    /// A dataset split could not satisfy its invariants.
    #[error("split error: {0}")]
    Split(String),

    /// An evaluation set cannot support the requested metric.
    #[error("metric error: {0}")]
    Metric(String),

    /// A token has no embedding in the vocabulary table.
    #[error("unknown vocabulary token: {0}")]
    Vocabulary(String),

    /// Two evaluations of a supposedly pure function disagreed.
    #[error("non-deterministic function: {0}")]
    Determinism(String),

    /// A serialized artifact does not match what the loader expects.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether this error is a configuration problem (CLI exit code 1)
    /// rather than a runtime failure (exit code 2).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library. Variants carry enough context to be
/// actionable without holding references into caller data.
#[derive(Debug, Error)]
pub enum Error {
    /// A trace violated an ordering or range invariant at construction.
    #[error("invalid trace at packet {index}: {reason}")]
    InvalidTrace { index: usize, reason: String },

    /// A parameter was outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A feature extractor needed more packets than the input holds.
    #[error("empty feature: need at least {needed} packets, got {got}")]
    EmptyFeature { needed: usize, got: usize },

    /// Distance requested against a zero vector or empty histogram.
    #[error("distance undefined for a zero vector")]
    UndefinedDistance,

    /// KL divergence undefined: q(x) = 0 somewhere p(x) > 0.
    #[error("divergence undefined: no mass in q at key {key}")]
    UndefinedDivergence { key: String },

    /// Contingency table degenerated to a single row or column.
    #[error("independence untestable: contingency table has a single {axis}")]
    IndependenceUntestable { axis: &'static str },

    /// Real traffic arrived faster than the shaping rate can carry.
    #[error("shaping overload: real traffic backlog exceeded one period near t={at:.3}s")]
    Overload { at: f64 },

    /// Packet size outside the padding table's supported range.
    #[error("unsupported size {size} for the tiered padding table")]
    UnsupportedSize { size: u32 },

    /// Profile learning was asked to model an empty trace.
    #[error("cannot learn a profile from an empty trace")]
    EmptyProfile,

    /// Model/test label sets disagree.
    #[error("label mismatch: {0}")]
    LabelMismatch(String),

    /// Subset enumeration refused: too many devices for exhaustive search.
    #[error("subset enumeration over {n} devices exceeds the guard of {max}")]
    CombinatorialGuard { n: usize, max: usize },

    /// Two packets landed in one slot: the trace is not valid shaped output.
    #[error("malformed shaping: two packets map to slot {slot}")]
    MalformedShaping { slot: usize },

    /// A classifier needs both classes present to train or calibrate.
    #[error("training data contains a single class")]
    SingleClass,

    /// Not enough data for the requested operation.
    #[error("not enough data: {0}")]
    NotEnoughData(String),

    /// Malformed trace or model file.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Unknown experiment name passed to the runner.
    #[error("unknown experiment '{0}'")]
    UnknownExperiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use thiserror::Error;

use crate::optimize::EnergyReport;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by geometry, mining, optimization, I/O and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a structural invariant (empty cloud, non-finite
    /// coordinate, mismatched array lengths, non-unit normal, ...).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("point index {index} out of range for size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    /// A point subset too small or too uniform for the requested operation.
    #[error("degenerate subset: {0}")]
    DegenerateSubset(String),

    /// Affinity graph has no nonzero weights, so the property loss is undefined.
    #[error("degenerate affinity graph: no nonzero weights")]
    DegenerateGraph,

    /// IoU of two empty sets (or two zero-volume boxes) is undefined.
    #[error("IoU undefined: empty union")]
    UndefinedIou,

    /// Energy exploded past 1e6 x the initial value during descent.
    #[error("energy diverged at iteration {iteration}: {energy:e} vs initial {initial:e}")]
    Diverged {
        iteration: usize,
        energy: f64,
        initial: f64,
        /// Per-iteration record up to and including the diverging step.
        report: Box<EnergyReport>,
    },

    #[error("parse error in {path}: {kind}")]
    Parse { path: String, kind: ParseErrorKind },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Registry lookup miss for a named strategy (proposal source, shape recipe).
    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distinct failure modes of the scene/instance file parsers.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version '{0}'")]
    UnsupportedVersion(String),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("annotation index {index} out of range for {len} points")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed record at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

impl Error {
    pub(crate) fn parse(path: &std::path::Path, kind: ParseErrorKind) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            kind,
        }
    }
}

//! Crate-wide error type.
//!
//! Exit-code policy for the CLI lives in `main.rs`: configuration, parsing,
//! and shape problems are usage errors (exit 1); `Diverged`,
//! `DegenerateChannel`, and `NonFiniteGradient` are numerical failures
//! (exit 2).

use crate::dalayer::Domain;

pub type Result<T> = std::result::Result<T, Error>;

fn degenerate_msg(channel: &usize, value: &f64, layer: &Option<usize>) -> String {
    let at = layer.map(|l| format!(" in alignment layer {l}")).unwrap_or_default();
    format!("degenerate channel {channel}{at}: squared scale {value:e} is below the positivity floor")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("matrix data length {got} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("{}", degenerate_msg(.channel, .value, .layer))]
    DegenerateChannel { channel: usize, value: f64, layer: Option<usize> },

    #[error("insufficient {domain:?} rows in batch: got {got}, need at least {need}")]
    InsufficientDomainSamples { domain: Domain, got: usize, need: usize },

    #[error("stale cache: {0}")]
    StaleCache(&'static str),

    #[error("no frozen parameters stored for {domain:?}")]
    MissingFrozenParams { domain: Domain },

    #[error("layer is frozen; per-batch training forward is not permitted")]
    FrozenLayer,

    #[error("source row {row} has no label")]
    MissingLabel { row: usize },

    #[error("row {row} has label {label} outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },

    #[error("bad architecture: {0}")]
    BadArchitecture(String),

    #[error("bad specification: {0}")]
    BadSpec(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line} has {got} columns, expected {expected}")]
    InconsistentWidth { line: usize, expected: usize, got: usize },

    #[error("unknown domain tag {tag:?} at line {line}")]
    UnknownDomainTag { line: usize, tag: String },

    #[error("config error{}: {message}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },

    #[error("non-finite gradient in parameter tensor {tensor}")]
    NonFiniteGradient { tensor: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the caller.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::DegenerateChannel { .. }
                | Error::NonFiniteGradient { .. }
        )
    }
}

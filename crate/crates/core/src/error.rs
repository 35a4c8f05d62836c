// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every diagnostics module.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, VtraceError>;

/// Everything that can go wrong inside the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum VtraceError {
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate representation: {0}")]
    DegenerateRepresentation(String),

    #[error("layer sets differ between checkpoints: {0}")]
    LayerMismatch(String),

    #[error("empty token span: {0}")]
    EmptySpan(&'static str),

    #[error("invalid token partition: {0}")]
    InvalidPartition(String),

    #[error("layer {layer} out of range for a {total}-layer model")]
    LayerOutOfRange { layer: usize, total: usize },

    #[error("invalid window width {0} (expected one of 1, 3, 5, 7)")]
    InvalidWidth(usize),

    #[error("query row {row} has no unblocked keys at layer {layer}")]
    FullyBlockedQuery { layer: usize, row: usize },

    #[error("incompatible intervention: {0}")]
    IncompatibleIntervention(String),

    #[error("cannot parse '{input}': {reason}")]
    Parse { input: String, reason: String },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("unknown token: {0}")]
    UnknownToken(String),

    #[error("heatmap has zero total mass")]
    DegenerateHeatmap,

    #[error("rollout has no steps")]
    EmptyRollout,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("no pixels outside the masked region to estimate a background color")]
    NoBackgroundSample,

    #[error("cannot place {needed} objects on a {grid}x{grid} grid: {reason}")]
    PlacementError { needed: usize, grid: usize, reason: String },

    #[error("bad container file {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VtraceError {
    /// True for errors caused by numerics (degenerate matrices or heatmaps)
    /// rather than malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            VtraceError::DegenerateRepresentation(_) | VtraceError::DegenerateHeatmap
        )
    }

    /// True for filesystem failures.
    pub fn is_io(&self) -> bool {
        matches!(self, VtraceError::Io { .. })
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VtraceError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(input: &str, reason: impl Into<String>) -> Self {
        VtraceError::Parse {
            input: input.to_string(),
            reason: reason.into(),
        }
    }
}

use crate::grid::Axis;

/// Crate-wide error type. Variants are grouped roughly by the layer that
/// raises them; dataset-format problems get distinct variants so callers can
/// tell a version mismatch from a short file from a count disagreement.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("joint {joint} axis {axis}: coordinate {value} outside [0, {upper}]")]
    JointOutOfBounds {
        joint: usize,
        axis: Axis,
        value: f64,
        upper: f64,
    },

    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("{path}: truncated blob, expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: u64,
        found: u64,
    },

    #[error("frame count mismatch: {detail}")]
    FrameCount { detail: String },

    #[error("dataset format: {0}")]
    DatasetFormat(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

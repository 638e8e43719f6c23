use std::path::PathBuf;

use thiserror::Error;

/// Everything the harness can fail with. Core quantization errors are
/// wrapped rather than flattened so callers can tell a bad run apart from
/// bad inputs.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("not a tensor file: bad magic")]
    BadMagic,

    #[error("unsupported tensor format version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("invalid tensor header: {0}")]
    InvalidHeader(String),

    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("{extra} trailing bytes after the payload")]
    TrailingData { extra: u64 },

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("reports mix incompatible grids: {0}")]
    MixedGrids(String),

    #[error(transparent)]
    Core(#[from] fastobq_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

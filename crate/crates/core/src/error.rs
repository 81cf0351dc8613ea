//! Crate-wide error type.

/// Convenience alias used by all fallible operations in this crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the library.
///
/// File-format problems are split into distinct variants (corruption,
/// version, config) so callers can tell a truncated file from a file written
/// by an incompatible build or for a different model shape.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("database too small: need {needed} records, have {available}")]
    DatabaseTooSmall { needed: usize, available: usize },

    #[error("unknown record id: {0}")]
    UnknownId(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("quaternion norm {norm} is outside the unit tolerance")]
    NonUnitQuaternion { norm: f64 },

    #[error("non-finite loss {value} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, value: f64 },
}

//! Crate-wide error type with a stable mapping onto process exit codes.

/// Everything that can go wrong, from shape mismatches deep in the graph to
/// malformed checkpoints on disk.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was handed tensors whose shapes do not line up.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation was called with arguments outside its contract
    /// (zero-size dims, bad axis, non-scalar loss, ...).
    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },

    /// A forward pass produced NaN or Inf. This is a hard error: training
    /// aborts rather than continuing with poisoned values.
    #[error("{op}: non-finite values produced")]
    NonFinite { op: &'static str },

    /// Bad run configuration (unknown keys, missing fields, out-of-range
    /// values).
    #[error("config: {0}")]
    Config(String),

    /// A file on disk does not match its expected format (checkpoint magic,
    /// CRC, PPM header, ...).
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    /// A verification suite (gradient checks, acceptance checks) ran fine
    /// but found failures.
    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand constructor for shape mismatches.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Shorthand constructor for contract violations.
    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid { op, detail: detail.into() }
    }

    /// Process exit code for the CLI: 1 = a check suite failed, 2 = bad
    /// usage / config / file format, 3 = numeric abort (NaN/Inf).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Check(_) => 1,
            Error::NonFinite { .. } => 3,
            Error::Shape { .. }
            | Error::Invalid { .. }
            | Error::Config(_)
            | Error::Format { .. }
            | Error::Io(_) => 2,
        }
    }
}

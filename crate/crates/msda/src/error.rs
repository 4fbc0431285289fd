use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or argument mismatch in a graph operation.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Configuration rejected with the offending field named.
    #[error("config field `{field}`: {detail}")]
    Config { field: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {detail}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("bad magic bytes (not an MSDA checkpoint)")]
    CheckpointMagic,

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint truncated")]
    CheckpointTruncated,

    #[error("checkpoint tensor `{name}`: {detail}")]
    CheckpointTensor { name: String, detail: String },

    /// Training produced a non-finite loss; the last good checkpoint is kept.
    #[error("non-finite loss at iteration {iteration}")]
    Diverged { iteration: u64 },

    #[error("non-finite values produced by `{op}`")]
    NonFinite { op: &'static str },

    /// A forward function handed to the gradient checker returned two
    /// different values for the same inputs.
    #[error("non-deterministic forward function: {0}")]
    NonDeterministic(String),

    #[error("gradient audit failed: {0}")]
    AuditFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. `exit_code` maps each class onto the process
/// exit codes the CLI promises: 1 contract/config, 2 numerical, 3 I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corruption detected in {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("checkpoint/model mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 0 is success and never produced here.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Geometry(_)
            | Error::Contract(_)
            | Error::Config(_)
            | Error::Construction(_)
            | Error::CheckpointMismatch(_) => 1,
            Error::Numerical(_) | Error::GradCheck(_) => 2,
            Error::Format { .. } | Error::Corruption { .. } | Error::Io { .. } => 3,
        }
    }
}

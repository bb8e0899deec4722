use std::path::Path;

use synreg_net::NetError;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::File {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for bad arguments, 3 for unreadable or unwritable files, 4 when
    /// training diverges.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::File { .. } | CliError::Io(_) | CliError::Format(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl From<synreg_core::Error> for CliError {
    fn from(e: synreg_core::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Divergence { .. } => CliError::Divergence(e.to_string()),
            NetError::Io(io) => CliError::Io(io),
            NetError::Format(m) => CliError::Format(m),
            NetError::Core(c) => c.into(),
            NetError::Shape(_) | NetError::Config(_) => CliError::Usage(e.to_string()),
        }
    }
}

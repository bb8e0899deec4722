use thiserror::Error;

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: u64, reason: String },
    #[error("weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] synreg_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("config error at '{path}': {msg}")]
    Config { path: String, msg: String },

    #[error(transparent)]
    Numerical(#[from] matlap::Error),

    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl AppError {
    /// Process exit status.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config { .. } => 2,
            _ => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HdrError>;

#[derive(Debug, Error)]
pub enum HdrError {
    #[error(transparent)]
    Core(#[from] hdrface_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: cannot decode image: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },

    #[error("{}:{line}: key `{key}`: {message}", path.display())]
    Config { path: PathBuf, line: usize, key: String, message: String },

    #[error("{}: bad checkpoint: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("{context}: {source}")]
    Json { context: String, source: serde_json::Error },
}

impl HdrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HdrError::Io { path: path.into(), source }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        HdrError::Usage(msg.into())
    }

    /// `1` for problems with the user's inputs, `2` for failures inside a run.
    pub fn exit_code(&self) -> i32 {
        use hdrface_core::Error as E;
        match self {
            HdrError::Core(e) => match root(e) {
                E::InvalidArgument(_) | E::EmptyBatch(_) | E::ShapeMismatch { .. } => 1,
                _ => 2,
            },
            HdrError::Io { .. } | HdrError::Image { .. } | HdrError::Config { .. } | HdrError::Checkpoint { .. } | HdrError::Usage(_) => 1,
            HdrError::Json { .. } => 2,
        }
    }
}

fn root(e: &hdrface_core::Error) -> &hdrface_core::Error {
    match e {
        hdrface_core::Error::Stage { source, .. } => root(source),
        other => other,
    }
}

use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum DprError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite: {0}")]
    Missing(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Png(#[from] image::ImageError),
}

impl DprError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user configuration rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_))
    }
}

pub type Result<T, E = DprError> = std::result::Result<T, E>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::DprError::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;

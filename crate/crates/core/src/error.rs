use std::path::PathBuf;

use clift_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = CliftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliftError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

impl CliftError {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Tensor(_) => "tensor",
            Self::Camera(_) => "camera",
            Self::Shape(_) => "shape",
            Self::InvalidArgument(_) => "invalid_argument",
            Self::Format { .. } => "format",
            Self::Io { .. } => "io",
            Self::Image { .. } => "image",
            Self::Config(_) => "config",
            Self::Diverged { .. } => "diverged",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

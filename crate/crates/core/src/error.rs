use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),

    #[error("{file}:{line}: {msg}")]
    Label {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("shape mismatch at {stage}: {msg}")]
    Shape { stage: String, msg: String },

    #[error("{0}")]
    Load(String),

    #[error("{0}")]
    Domain(String),

    #[error("non-finite {component} loss at iteration {iteration}")]
    NonFinite { component: String, iteration: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Checkpoint(#[from] safetensors::SafeTensorError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Label { .. } => "label",
            Error::Data(_) => "data",
            Error::Shape { .. } => "shape",
            Error::Load(_) | Error::Checkpoint(_) => "load",
            Error::Domain(_) => "domain",
            Error::NonFinite { .. } => "numeric",
            Error::Io { .. } | Error::Image { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "format",
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(stage: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            stage: stage.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

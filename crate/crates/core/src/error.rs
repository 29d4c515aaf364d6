use std::path::PathBuf;

use thiserror::Error;

use crate::bundle::BundleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("bundle `{bundle}` has no ground-truth mask")]
    MissingMask { bundle: String },

    #[error(transparent)]
    Bundle(#[from] BundleError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png encoding failed: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("png decoding failed: {0}")]
    PngDecode(#[from] png::DecodingError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by `--json-errors`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::MissingMask { .. } => "missing_mask",
            Error::Bundle(_) => "bundle",
            Error::Io { .. } => "io",
            Error::PngEncode(_) | Error::PngDecode(_) => "png",
        }
    }
}

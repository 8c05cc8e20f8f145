use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate gaussian: covariance determinant {det:e} below {min:e}")]
    DegenerateGaussian { det: f64, min: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("frame sequence is missing index {index}")]
    MissingFrame { index: usize },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("container decode failed in {section}: {reason}")]
    Decode { section: String, reason: String },

    #[error("unsupported container version {major}.{minor}")]
    UnsupportedVersion { major: u16, minor: u16 },

    #[error("{what} {value} out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: String,
        range: String,
    },

    #[error("GOP {gop}: {source}")]
    Gop {
        gop: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn decode(section: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Decode {
            section: section.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_gop(self, gop: usize) -> Self {
        Error::Gop {
            gop,
            source: Box::new(self),
        }
    }

    /// Strips GOP context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Gop { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self.root(),
            Error::Io { .. } | Error::Image { .. } | Error::MissingFrame { .. }
        )
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self.root(), Error::Divergence { .. })
    }
}

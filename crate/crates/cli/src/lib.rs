//! File formats, synthetic scene generation, and the CLI surface for the
//! `frontal-core` toolkit.
//!
//! - [`pnm`]: binary PGM (P5) and PPM (P6) images with a validity-mask
//!   sidecar.
//! - [`landmarks`]: plain-text 3D landmark files.
//! - [`model_file`]: the binary shape-model container with a payload
//!   checksum.
//! - [`synth`]: deterministic synthetic scenes (model, posed render,
//!   landmarks, and ground truth) for end-to-end evaluation.
//! - [`report`]: shared JSON records and numeric formatting for CLI output.

pub mod landmarks;
pub mod model_file;
pub mod pnm;
pub mod report;
pub mod synth;

use std::path::PathBuf;

/// Errors from file IO, format parsing, and scene generation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("unsupported format in {path}: {reason}")]
    Unsupported { path: PathBuf, reason: String },

    #[error("checksum mismatch in {path}")]
    Checksum { path: PathBuf },

    #[error(transparent)]
    Core(#[from] frontal_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed { path: path.into(), reason: reason.into() }
    }

    pub(crate) fn unsupported(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Unsupported { path: path.into(), reason: reason.into() }
    }
}

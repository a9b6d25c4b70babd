use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variant names double as the machine-readable tag printed by the CLI, so
/// they are kept stable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("UnreadableSource: {path}: {reason}")]
    UnreadableSource { path: PathBuf, reason: String },

    #[error("EmptyVideo: {0} has no frames")]
    EmptyVideo(String),

    #[error("BadArity: prompt count must be even and >= 2, got {0}")]
    BadArity(usize),

    #[error("BadSpec: {0}")]
    BadSpec(String),

    #[error("IndexOutOfRange: frame {index} not in [0, {frame_count})")]
    IndexOutOfRange { index: usize, frame_count: usize },

    #[error("DecodeFailure: {0}")]
    DecodeFailure(String),

    #[error("PatchBoundaryViolation: {dimension}: {detail}")]
    PatchBoundaryViolation { dimension: &'static str, detail: String },

    #[error("DegenerateCrop: crop {width}x{height} is smaller than one {min}px patch")]
    DegenerateCrop { width: usize, height: usize, min: usize },

    #[error("ArityMismatch: expected {expected} frames, got {got}")]
    ArityMismatch { expected: usize, got: usize },

    #[error("SizeMismatch: {0}")]
    SizeMismatch(String),

    #[error("GridMismatch: {0}")]
    GridMismatch(String),

    #[error("DimMismatch: {0}")]
    DimMismatch(String),

    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),

    #[error("NotTrainable: schedule has fixed frequencies")]
    NotTrainable,

    #[error("EmptyRegion: {0}")]
    EmptyRegion(String),

    #[error("EmptyText: decoder input needs at least one text token")]
    EmptyText,

    #[error("Divergence: loss became non-finite at step {0}")]
    Divergence(usize),

    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),

    #[error("Format: {0}")]
    Format(String),

    #[error("Io: {0}")]
    Io(#[from] std::io::Error),

    #[error("Json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("Image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::UnreadableSource { .. }
            | Error::EmptyVideo(_)
            | Error::IndexOutOfRange { .. }
            | Error::DecodeFailure(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Image(_) => ErrorKind::Input,
            Error::Divergence(_) => ErrorKind::Numeric,
            _ => ErrorKind::Config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Config,
    Numeric,
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: quaternion has zero norm")]
    DegenerateRotation,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid depth {depth} at pixel ({u}, {v})")]
    InvalidDepth { u: usize, v: usize, depth: f64 },
    #[error("point is behind camera (depth {0})")]
    BehindCamera(f64),
    #[error("degenerate point set: bounding box has zero extent")]
    DegeneratePointSet,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("label {label} out of range at index {index}")]
    LabelOutOfRange { index: usize, label: u32 },
    #[error("optimization diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("sidecar mismatch: splat has {splat} primitives, sidecar has {sidecar}")]
    SidecarMismatch { splat: usize, sidecar: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

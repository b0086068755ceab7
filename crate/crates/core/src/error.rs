use std::io;

use thiserror::Error;

/// Errors raised by tensor operations, layers, training and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("batch norm needs more than one value per channel in train mode")]
    DegenerateBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },
    #[error("every pixel carries the ignore label")]
    AllIgnored,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("parameter `{0}` not found")]
    MissingParam(String),
    #[error("scene spec infeasible: {0}")]
    SpecInfeasible(String),
    #[error("arrangement `{0}` has no local distribution stage")]
    NoMaskInArrangement(String),
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

pub(crate) fn spec_err(msg: impl Into<String>) -> Error {
    Error::InvalidSpec(msg.into())
}

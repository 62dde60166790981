use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("malformed NIfTI header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("non-3D payload in {path}: {ndim} dimensions")]
    NotThreeDimensional { path: PathBuf, ndim: usize },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid label value {value} (expected 0..=3)")]
    InvalidLabel { value: u8 },

    #[error("region hierarchy violated at voxel {index}: et ⊆ tc ⊆ wt must hold")]
    HierarchyViolation { index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("tumor does not fit: {0}")]
    TumorDoesNotFit(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Nifti(#[from] nifti::NiftiError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

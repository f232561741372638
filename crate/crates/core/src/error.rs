//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// A constrained parameterization was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A dataset file exists but does not parse or violates an invariant.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A requested frame directory does not exist.
    #[error("missing frame {0}")]
    MissingFrame(usize),

    /// Triangulation rays are nearly parallel (or the baseline is zero).
    #[error("degenerate rays: angle below threshold")]
    DegenerateRays,

    /// A triangulated point lies behind the reference camera.
    #[error("triangulated point behind camera")]
    BehindCamera,

    /// Point cloud has fewer than three non-collinear points.
    #[error("degenerate point cloud: no plane support")]
    DegenerateCloud,

    /// Fitted road plane is near-vertical; the ground assumption is violated.
    #[error("vertical plane: |B| = {b:.3e} after fit")]
    VerticalPlane { b: f64 },

    /// Two images that must agree in shape do not.
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    /// A gradient buffer contained NaN/inf; the optimizer step was skipped.
    #[error("non-finite gradient; step skipped")]
    NonFiniteGradient,

    /// The scene was mutated between a render and its backward pass.
    #[error("stale render state: scene revision {got}, render captured {expected}")]
    StaleState { expected: u64, got: u64 },

    /// TSDF volume has no observed zero crossing to mesh.
    #[error("empty volume: nothing observed")]
    EmptyVolume,

    /// Bad configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint container is malformed or has an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

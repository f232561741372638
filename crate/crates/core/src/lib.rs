//! Online dense mapping for unbounded street-like scenes.
//!
//! The world is represented by three constrained Gaussian families — a sky
//! sphere, road-plane segments, and free 3D Gaussians — rendered by a
//! grouped-sort differentiable splatting rasterizer and fitted incrementally
//! from an RGB + sparse-depth + pose stream.

pub mod adapt;
pub mod checkpoint;
pub mod error;
pub mod img;
pub mod ingest;
pub mod init;
pub mod math;
pub mod mesh;
pub mod metrics;
pub mod optimize;
pub mod par;
pub mod pipeline;
pub mod plane;
pub mod rasterizer;
pub mod scene;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

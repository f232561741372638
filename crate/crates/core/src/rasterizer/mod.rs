//! The performance core: projects the three Gaussian families, bins them
//! into 16x16 tiles, sorts per family, composites color / depth / silhouette
//! front-to-back, and computes analytic gradients.
//!
//! Road Gaussians are excluded from depth sorting: per tile the free family
//! is sorted, road Gaussians keep insertion order, the sky family is sorted,
//! and the groups composite in the order free, road, sky.

mod backward;
mod forward;
mod project;
mod sort;

pub use backward::backward;
pub use forward::{composite_pixel, render, render_with, unified_comparison_count, SortMode};
pub use project::project;

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::img::{Image, ImageRgb};
use crate::math::Quat;
use crate::scene::HybridScene;

pub const TILE_SIZE: usize = 16;
/// Near-plane cull distance, meters.
pub const NEAR_PLANE: f64 = 0.1;
/// Screen-space covariance dilation, pixels².
pub const COV_REGULARIZATION: f64 = 0.3;
/// Front-to-back accumulation stops below this transmittance.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
/// Binning footprint: this many standard deviations around the mean.
pub const FOOTPRINT_SIGMA: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Free,
    Plane,
    Sky,
}

/// Inclusive pixel-index bounds of a primitive's screen footprint,
/// already clipped to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelRect {
    #[inline]
    pub fn contains(&self, u: i64, v: i64) -> bool {
        u >= self.x0 && u <= self.x1 && v >= self.y0 && v <= self.y1
    }

    pub fn pixel_count(&self) -> u64 {
        if self.x1 < self.x0 || self.y1 < self.y0 {
            0
        } else {
            ((self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)) as u64
        }
    }
}

/// A Gaussian after projection to the screen.
#[derive(Clone, Debug)]
pub struct SplatPrimitive {
    /// Projected center, continuous pixel coordinates.
    pub mean2d: Vector2<f64>,
    /// Regularized 2x2 screen covariance, pixels².
    pub cov2d: Matrix2<f64>,
    /// Cached inverse of `cov2d`.
    pub inv_cov2d: Matrix2<f64>,
    /// Camera-frame z of the Gaussian center, meters.
    pub depth: f64,
    pub color: Vector3<f64>,
    /// Sigmoid-activated opacity in (0,1).
    pub opacity: f64,
    pub family: Family,
    /// Index into the family's vector in the scene.
    pub source: usize,
    /// Clipped 3-sigma screen footprint.
    pub rect: PixelRect,
    /// Camera-frame center (projection chain context for backward).
    pub cam_pos: Vector3<f64>,
}

/// Rendered images plus the cached per-tile sort state the backward pass
/// replays.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: ImageRgb,
    pub depth: Image,
    pub silhouette: Image,
    /// Final per-pixel transmittance (1 - silhouette up to round-off).
    pub transmittance: Image,
    pub primitives: Vec<SplatPrimitive>,
    /// Ordered primitive indices per tile, row-major tile order.
    pub tile_order: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Comparator invocations spent ordering this frame.
    pub sort_comparisons: u64,
    pub scene_revision: u64,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }
}

/// Per-parameter gradients for every learnable field of all three families,
/// plus accumulated densification statistics for the free family.
#[derive(Clone, Debug, Default)]
pub struct FreeGrad {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub color: Vector3<f64>,
    pub rotation: Quat,
    pub opacity: f64,
}

impl FreeGrad {
    pub fn zeroed() -> Self {
        FreeGrad {
            position: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            color: Vector3::zeros(),
            rotation: Quat::zeros(),
            opacity: 0.0,
        }
    }
}

/// Gradient record shared by the two constrained families (8 learnables).
#[derive(Clone, Debug, Default)]
pub struct ConstrainedGrad {
    pub xz: Vector2<f64>,
    pub log_scale_xz: Vector2<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
}

/// Accumulated 2D positional gradient norms and observation counts per free
/// Gaussian; drives densification and the importance score.
#[derive(Clone, Debug, Default)]
pub struct DensifyStats {
    pub grad2d_norm: Vec<f64>,
    pub observations: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        DensifyStats {
            grad2d_norm: vec![0.0; n],
            observations: vec![0; n],
        }
    }

    pub fn reset(&mut self) {
        self.grad2d_norm.iter_mut().for_each(|v| *v = 0.0);
        self.observations.iter_mut().for_each(|v| *v = 0);
    }
}

#[derive(Clone, Debug)]
pub struct GradientBuffer {
    pub free: Vec<FreeGrad>,
    pub sky: Vec<ConstrainedGrad>,
    pub plane: Vec<ConstrainedGrad>,
    pub stats: DensifyStats,
}

impl GradientBuffer {
    pub fn for_scene(scene: &HybridScene) -> Self {
        GradientBuffer {
            free: vec![FreeGrad::zeroed(); scene.free.len()],
            sky: vec![ConstrainedGrad::default(); scene.sky.len()],
            plane: vec![ConstrainedGrad::default(); scene.plane.len()],
            stats: DensifyStats::new(scene.free.len()),
        }
    }

    pub fn matches(&self, scene: &HybridScene) -> bool {
        self.free.len() == scene.free.len()
            && self.sky.len() == scene.sky.len()
            && self.plane.len() == scene.plane.len()
            && self.stats.grad2d_norm.len() == scene.free.len()
    }

    /// Zero the per-parameter gradients, keeping densification statistics.
    pub fn zero_params(&mut self) {
        self.free.iter_mut().for_each(|g| *g = FreeGrad::zeroed());
        self.sky.iter_mut().for_each(|g| *g = ConstrainedGrad::default());
        self.plane.iter_mut().for_each(|g| *g = ConstrainedGrad::default());
    }

    /// Resize to a scene whose Gaussian counts changed; new slots start
    /// zeroed. Existing statistics for surviving leading entries persist
    /// only when the caller has already compacted them.
    pub fn resize_for(&mut self, scene: &HybridScene) {
        self.free.resize(scene.free.len(), FreeGrad::zeroed());
        self.sky.resize(scene.sky.len(), ConstrainedGrad::default());
        self.plane.resize(scene.plane.len(), ConstrainedGrad::default());
        self.stats.grad2d_norm.resize(scene.free.len(), 0.0);
        self.stats.observations.resize(scene.free.len(), 0);
    }

    pub fn all_finite(&self) -> bool {
        let free_ok = self.free.iter().all(|g| {
            g.position.iter().all(|v| v.is_finite())
                && g.log_scale.iter().all(|v| v.is_finite())
                && g.color.iter().all(|v| v.is_finite())
                && g.rotation.iter().all(|v| v.is_finite())
                && g.opacity.is_finite()
        });
        let con_ok = |v: &Vec<ConstrainedGrad>| {
            v.iter().all(|g| {
                g.xz.iter().all(|v| v.is_finite())
                    && g.log_scale_xz.iter().all(|v| v.is_finite())
                    && g.color.iter().all(|v| v.is_finite())
                    && g.opacity.is_finite()
            })
        };
        free_ok && con_ok(&self.sky) && con_ok(&self.plane)
    }
}

pub(crate) fn tile_counts(width: usize, height: usize) -> (usize, usize) {
    (width.div_ceil(TILE_SIZE), height.div_ceil(TILE_SIZE))
}

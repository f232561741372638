//! The three Gaussian families and the lifting math that turns their
//! constrained learnable parameters into full 3D Gaussians.
//!
//! Free Gaussians carry 14 learnable scalars; sphere (sky) and plane (road)
//! Gaussians carry 8 each — position and thickness are recovered from the
//! sphere / plane constraint at lift time.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quat_from_y_to, quat_to_matrix, Quat, QUAT_IDENTITY};

/// Unconstrained ellipsoidal Gaussian for roadside structure.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeGaussian {
    /// World-frame center, meters.
    pub position: Vector3<f64>,
    /// Log of the per-axis standard deviations, meters.
    pub log_scale: Vector3<f64>,
    /// RGB in [0,1].
    pub color: Vector3<f64>,
    /// Raw quaternion (w,x,y,z); renormalized after every optimizer step.
    pub rotation: Quat,
    /// Opacity logit; activated through a sigmoid.
    pub opacity: f64,
}

impl FreeGaussian {
    pub const PARAM_COUNT: usize = 14;

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }
}

/// Gaussian constrained to a camera-centered sky sphere of radius R.
/// Stores only the (x,z) footprint on the sphere; y and the radial
/// alignment rotation are recovered by [`lift_sphere`].
#[derive(Clone, Debug, PartialEq)]
pub struct SphereGaussian {
    /// Sky-frame (x,z), strictly inside the disc x²+z² < R².
    pub xz: Vector2<f64>,
    /// Log scales of the two tangential axes, meters.
    pub log_scale_xz: Vector2<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
}

impl SphereGaussian {
    pub const PARAM_COUNT: usize = 8;
}

/// Gaussian constrained to a fitted road-plane segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneGaussian {
    /// World-frame (x,z); height comes from the segment's plane equation.
    pub xz: Vector2<f64>,
    pub log_scale_xz: Vector2<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
    /// Index into [`HybridScene::segments`].
    pub segment_id: usize,
}

impl PlaneGaussian {
    pub const PARAM_COUNT: usize = 8;
}

/// One road-plane equation Ax+By+Cz+D = 0 with unit normal and B > 0,
/// valid for frames in `[valid_range.0, valid_range.1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSegment {
    /// (A,B,C,D) with ‖(A,B,C)‖ = 1 and B > 0.
    pub coefficients: nalgebra::Vector4<f64>,
    /// Frame index interval; `usize::MAX` end means open-ended.
    pub valid_range: (usize, usize),
}

impl PlaneSegment {
    pub fn normal(&self) -> Vector3<f64> {
        self.coefficients.xyz()
    }

    /// Signed distance of a point to the plane (normal is unit length).
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal().dot(p) + self.coefficients.w
    }

    pub fn contains_frame(&self, index: usize) -> bool {
        index >= self.valid_range.0 && index < self.valid_range.1
    }
}

/// Every tunable of the mapping pipeline. Serialized as the documented
/// key-value config file; all fields have defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Sky sphere radius, meters.
    pub sky_radius: f64,
    /// Fixed radial thickness of sky Gaussians, meters.
    pub sky_thickness: f64,
    /// Fixed normal-direction thickness of road Gaussians, meters.
    pub plane_thickness: f64,
    /// RANSAC inlier distance threshold, meters.
    pub plane_distance_threshold: f64,
    /// RANSAC hypothesis count.
    pub ransac_iterations: usize,
    /// Opacity prune threshold (activated, i.e. after sigmoid).
    pub prune_opacity: f64,
    /// Scale prune threshold, meters (activated).
    pub prune_scale: f64,
    /// Densify when the mean accumulated 2D positional gradient exceeds this.
    pub densify_grad_threshold: f64,
    /// Free Gaussians larger than `split_size_fraction * scene_extent` split
    /// instead of cloning.
    pub split_size_fraction: f64,
    /// Rough spatial extent of the scene, meters; scales position learning
    /// rate and the split size.
    pub scene_extent: f64,
    /// D-SSIM mixing weight inside the RGB loss.
    pub lambda_dssim: f64,
    pub lambda_rgb: f64,
    pub lambda_lidar: f64,
    pub lambda_smooth: f64,
    pub lambda_iso: f64,
    pub lambda_reg: f64,
    /// Keyframe list capacity K.
    pub keyframe_count: usize,
    /// Keyframe list update interval n, frames.
    pub keyframe_interval: usize,
    /// Optimization iterations per incoming frame.
    pub iterations_per_frame: usize,
    /// Silhouette threshold below which new Gaussians are seeded.
    pub silhouette_add: f64,
    /// Silhouette threshold for depth filtering and the LiDAR loss mask.
    pub silhouette_filter: f64,
    /// Importance pruning rate, percent of free Gaussians per event.
    pub prune_rate: f64,
    /// Optical-flow threshold separating triangulation from approximation, px.
    pub flow_threshold: f64,
    /// Fallback depth-approximation constant (d·f/tanθ) when too few
    /// triangulated points are available to calibrate it.
    pub depth_approx_constant: f64,
    /// Depth-sort road Gaussians too (diagnostic; default off).
    pub sort_inliers: bool,
    pub lr_position: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            sky_radius: 1000.0,
            sky_thickness: 1.0,
            plane_thickness: 0.01,
            plane_distance_threshold: 0.15,
            ransac_iterations: 200,
            prune_opacity: 0.005,
            prune_scale: 1.0,
            densify_grad_threshold: 2e-4,
            split_size_fraction: 0.05,
            scene_extent: 20.0,
            lambda_dssim: 0.2,
            lambda_rgb: 1.0,
            lambda_lidar: 0.5,
            lambda_smooth: 0.1,
            lambda_iso: 10.0,
            lambda_reg: 1.0,
            keyframe_count: 10,
            keyframe_interval: 5,
            iterations_per_frame: 100,
            silhouette_add: 0.5,
            silhouette_filter: 0.9,
            prune_rate: 3.0,
            flow_threshold: 2.0,
            depth_approx_constant: 200.0,
            sort_inliers: false,
            lr_position: 1.6e-4,
            lr_color: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sky_radius", self.sky_radius),
            ("sky_thickness", self.sky_thickness),
            ("plane_thickness", self.plane_thickness),
            ("plane_distance_threshold", self.plane_distance_threshold),
            ("prune_opacity", self.prune_opacity),
            ("prune_scale", self.prune_scale),
            ("densify_grad_threshold", self.densify_grad_threshold),
            ("scene_extent", self.scene_extent),
            ("flow_threshold", self.flow_threshold),
            ("silhouette_add", self.silhouette_add),
            ("silhouette_filter", self.silhouette_filter),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::Config(format!(
                "lambda_dssim must lie in [0,1], got {}",
                self.lambda_dssim
            )));
        }
        if !(0.0..100.0).contains(&self.prune_rate) {
            return Err(Error::Config(format!(
                "prune_rate must lie in [0,100), got {}",
                self.prune_rate
            )));
        }
        if self.keyframe_count < 2 {
            return Err(Error::Config("keyframe_count must be at least 2".into()));
        }
        if self.keyframe_interval == 0 {
            return Err(Error::Config("keyframe_interval must be nonzero".into()));
        }
        Ok(())
    }

    pub fn split_size(&self) -> f64 {
        self.split_size_fraction * self.scene_extent
    }
}

/// The full hybrid representation: three Gaussian families, the road-plane
/// segments, and shared configuration.
///
/// Single-writer: mutating operations bump `revision` so a backward pass can
/// detect that its cached render state went stale.
#[derive(Clone, Debug)]
pub struct HybridScene {
    pub free: Vec<FreeGaussian>,
    pub sky: Vec<SphereGaussian>,
    pub plane: Vec<PlaneGaussian>,
    pub segments: Vec<PlaneSegment>,
    pub config: SceneConfig,
    revision: u64,
}

impl HybridScene {
    pub fn new(config: SceneConfig) -> Self {
        HybridScene {
            free: Vec::new(),
            sky: Vec::new(),
            plane: Vec::new(),
            segments: Vec::new(),
            config,
            revision: 0,
        }
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Mark the scene as mutated. Every operation that changes parameters,
    /// counts, or segments must call this.
    pub fn bump_revision(&mut self) {
        self.revision += 1;
    }

    pub fn total_gaussians(&self) -> usize {
        self.free.len() + self.sky.len() + self.plane.len()
    }

    /// Segment whose validity interval covers `frame_index`, falling back to
    /// the last segment for frames past the final keyframe.
    pub fn segment_for_frame(&self, frame_index: usize) -> Option<(usize, &PlaneSegment)> {
        self.segments
            .iter()
            .enumerate()
            .find(|(_, s)| s.contains_frame(frame_index))
            .or_else(|| self.segments.iter().enumerate().last())
    }

    /// Total learnable scalar count across all families.
    pub fn parameter_count(&self) -> usize {
        self.free.len() * FreeGaussian::PARAM_COUNT
            + self.sky.len() * SphereGaussian::PARAM_COUNT
            + self.plane.len() * PlaneGaussian::PARAM_COUNT
    }
}

/// Result of lifting a constrained Gaussian to a full 3D one.
#[derive(Clone, Copy, Debug)]
pub struct Lifted {
    pub position: Vector3<f64>,
    /// Unit quaternion mapping the canonical thickness axis (0,1,0) onto the
    /// constraint direction.
    pub rotation: Quat,
    /// Activated per-axis standard deviations (x, thickness, z).
    pub scale: Vector3<f64>,
}

/// Lift a sky Gaussian onto the sphere of radius `r`: recover y, align the
/// thickness axis with the outward radial direction, activate scales.
pub fn lift_sphere(g: &SphereGaussian, r: f64, thickness: f64) -> Result<Lifted> {
    let (x, z) = (g.xz.x, g.xz.y);
    let d2 = x * x + z * z;
    if d2 >= r * r {
        return Err(Error::Domain(format!(
            "sphere Gaussian footprint outside disc: x²+z² = {d2:.6} ≥ R² = {:.6}",
            r * r
        )));
    }
    let y = (r * r - d2).sqrt();
    let rotation = if d2 == 0.0 {
        QUAT_IDENTITY
    } else {
        quat_from_y_to(&Vector3::new(x, y, z))
    };
    Ok(Lifted {
        position: Vector3::new(x, y, z),
        rotation,
        scale: Vector3::new(g.log_scale_xz.x.exp(), thickness, g.log_scale_xz.y.exp()),
    })
}

/// Lift a road Gaussian onto its plane segment: recover y from the plane
/// equation and align the thickness axis with the plane normal.
pub fn lift_plane(g: &PlaneGaussian, seg: &PlaneSegment, thickness: f64) -> Result<Lifted> {
    let c = &seg.coefficients;
    let (a, b, cc, d) = (c.x, c.y, c.z, c.w);
    if b.abs() < 1e-9 {
        return Err(Error::Domain(format!(
            "plane segment is vertical: |B| = {:.3e}",
            b.abs()
        )));
    }
    let (x, z) = (g.xz.x, g.xz.y);
    let y = (-a * x - cc * z - d) / b;
    let rotation = quat_from_y_to(&Vector3::new(a, b, cc));
    Ok(Lifted {
        position: Vector3::new(x, y, z),
        rotation,
        scale: Vector3::new(g.log_scale_xz.x.exp(), thickness, g.log_scale_xz.y.exp()),
    })
}

/// Σ = R · diag(s)² · Rᵀ for a unit quaternion and activated scales.
pub fn materialize_covariance(rotation: &Quat, scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_matrix(rotation);
    let m = r * Matrix3::from_diagonal(&scale.map(|s| s * s)) * r.transpose();
    // Symmetrize to kill round-off skew.
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::quat_rotate;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sky(x: f64, z: f64) -> SphereGaussian {
        SphereGaussian {
            xz: Vector2::new(x, z),
            log_scale_xz: Vector2::new(0.3, -0.2),
            color: Vector3::new(0.5, 0.6, 0.7),
            opacity: 0.0,
        }
    }

    #[test]
    fn lift_sphere_zenith_is_identity() {
        let l = lift_sphere(&sky(0.0, 0.0), 100.0, 1.0).unwrap();
        assert_abs_diff_eq!(l.position, Vector3::new(0.0, 100.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(l.rotation, QUAT_IDENTITY, epsilon = 1e-12);
        assert_abs_diff_eq!(
            l.scale,
            Vector3::new(0.3f64.exp(), 1.0, (-0.2f64).exp()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn lift_sphere_near_equator_approaches_quarter_turn() {
        // x → R limit: thickness axis must swing 90° about -z.
        let l = lift_sphere(&sky(99.99, 0.0), 100.0, 1.0).unwrap();
        let half = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(l.rotation[0], half, epsilon = 1e-2);
        assert_abs_diff_eq!(l.rotation[3], -half, epsilon = 1e-2);
        assert_abs_diff_eq!(l.rotation[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.rotation[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lift_sphere_rotates_thickness_axis_onto_radial() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = 250.0;
        for _ in 0..200 {
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let rad = rng.gen_range(0.0..0.999) * r;
            let g = sky(rad * ang.cos(), rad * ang.sin());
            let l = lift_sphere(&g, r, 2.0).unwrap();
            let radial = l.position / r;
            let rotated = quat_rotate(&l.rotation, &Vector3::y());
            assert!((rotated - radial).norm() < 1e-9);
            // Lifted point sits on the sphere.
            assert!((l.position.norm() - r).abs() < 1e-9 * r);
        }
    }

    #[test]
    fn lift_sphere_rejects_outside_disc() {
        assert!(matches!(
            lift_sphere(&sky(80.0, 60.0), 100.0, 1.0),
            Err(Error::Domain(_))
        ));
    }

    fn road(x: f64, z: f64, segment_id: usize) -> PlaneGaussian {
        PlaneGaussian {
            xz: Vector2::new(x, z),
            log_scale_xz: Vector2::new(0.0, 0.0),
            color: Vector3::new(0.4, 0.4, 0.4),
            opacity: 0.0,
            segment_id,
        }
    }

    fn segment(a: f64, b: f64, c: f64, d: f64) -> PlaneSegment {
        let n = (a * a + b * b + c * c).sqrt();
        PlaneSegment {
            coefficients: nalgebra::Vector4::new(a / n, b / n, c / n, d / n),
            valid_range: (0, usize::MAX),
        }
    }

    #[test]
    fn lift_plane_flat_ground() {
        let l = lift_plane(&road(3.0, -2.0, 0), &segment(0.0, 1.0, 0.0, 0.0), 0.01).unwrap();
        assert_abs_diff_eq!(l.position, Vector3::new(3.0, 0.0, -2.0), epsilon = 1e-12);
        assert_abs_diff_eq!(l.rotation, QUAT_IDENTITY, epsilon = 1e-12);
    }

    #[test]
    fn lift_plane_offset_height() {
        // y = 5 plane: 0x + 1y + 0z - 5 = 0.
        let seg = segment(0.0, 1.0, 0.0, -5.0);
        for (x, z) in [(0.0, 0.0), (3.0, 7.0), (-10.0, 2.5)] {
            let l = lift_plane(&road(x, z, 0), &seg, 0.01).unwrap();
            assert_abs_diff_eq!(l.position.y, 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn lift_plane_aligns_thickness_with_normal() {
        let seg = segment(0.1, 0.99, 0.1, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let g = road(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), 0);
            let l = lift_plane(&g, &seg, 0.01).unwrap();
            let rotated = quat_rotate(&l.rotation, &Vector3::y());
            assert!((rotated - seg.normal()).norm() < 1e-9);
            assert!(seg.signed_distance(&l.position).abs() < 1e-9);
        }
    }

    #[test]
    fn lift_plane_rejects_vertical() {
        let seg = PlaneSegment {
            coefficients: nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0),
            valid_range: (0, usize::MAX),
        };
        assert!(matches!(
            lift_plane(&road(0.0, 0.0, 0), &seg, 0.01),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn covariance_identity_rotation() {
        let m = materialize_covariance(&QUAT_IDENTITY, &Vector3::new(1.0, 2.0, 3.0));
        assert_abs_diff_eq!(
            m,
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_quarter_turn_about_z_swaps_axes() {
        let half = std::f64::consts::FRAC_PI_4;
        let q = Quat::new(half.cos(), 0.0, 0.0, half.sin());
        let m = materialize_covariance(&q, &Vector3::new(1.0, 2.0, 1.0));
        assert_abs_diff_eq!(
            m,
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let q = crate::math::quat_normalize(&Quat::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let s = Vector3::new(
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.1..3.0),
            );
            let m = materialize_covariance(&q, &s);
            assert!((m - m.transpose()).norm() < 1e-12);
            let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, w) in eig.iter().zip(&want) {
                assert!((e - w).abs() < 1e-9, "eig {e} vs scale² {w}");
                assert!(*e >= 0.0);
            }
        }
    }

    #[test]
    fn learnable_parameter_counts() {
        assert_eq!(FreeGaussian::PARAM_COUNT, 14);
        assert_eq!(SphereGaussian::PARAM_COUNT, 8);
        assert_eq!(PlaneGaussian::PARAM_COUNT, 8);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = SceneConfig::default();
        c.validate().unwrap();
        c.lambda_dssim = 1.5;
        assert!(c.validate().is_err());
        let mut c = SceneConfig::default();
        c.prune_rate = 100.0;
        assert!(c.validate().is_err());
    }
}

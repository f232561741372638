//! EWA projection of the three families into screen-space splats.

use nalgebra::{Matrix2, Matrix3x2, Vector3};

use crate::ingest::Frame;
use crate::math::sigmoid;
use crate::scene::{lift_plane, lift_sphere, materialize_covariance, HybridScene};

use super::{
    Family, PixelRect, SplatPrimitive, COV_REGULARIZATION, FOOTPRINT_SIGMA, NEAR_PLANE,
};

/// Perspective Jacobian ∂(u,v)/∂(x,y,z) at a camera-frame point, laid out
/// as a 3x2 (transposed) block for convenient right-multiplication.
fn pinhole_jacobian(fx: f64, fy: f64, p: &Vector3<f64>) -> Matrix3x2<f64> {
    let z_inv = 1.0 / p.z;
    let z_inv2 = z_inv * z_inv;
    Matrix3x2::new(
        fx * z_inv,
        0.0,
        0.0,
        fy * z_inv,
        -fx * p.x * z_inv2,
        -fy * p.y * z_inv2,
    )
}

fn footprint(mean: &nalgebra::Vector2<f64>, cov: &Matrix2<f64>, w: usize, h: usize) -> Option<PixelRect> {
    // Half extents of the k-sigma ellipse's exact AABB.
    let rx = FOOTPRINT_SIGMA * cov[(0, 0)].sqrt();
    let ry = FOOTPRINT_SIGMA * cov[(1, 1)].sqrt();
    // Pixel (i,j) samples its center (i+0.5, j+0.5).
    let x0 = (mean.x - rx - 0.5).ceil().max(0.0) as i64;
    let x1 = (mean.x + rx - 0.5).floor().min(w as f64 - 1.0) as i64;
    let y0 = (mean.y - ry - 0.5).ceil().max(0.0) as i64;
    let y1 = (mean.y + ry - 0.5).floor().min(h as f64 - 1.0) as i64;
    if x0 > x1 || y0 > y1 || mean.x + rx < 0.0 || mean.y + ry < 0.0 {
        return None;
    }
    Some(PixelRect {
        x0,
        y0,
        x1,
        y1,
    })
}

/// Project every Gaussian of the scene into screen space for `frame`,
/// culling primitives behind the near plane or off screen.
///
/// Sky Gaussians live on a sphere centered at the current camera center with
/// world-parallel axes, so their camera-frame position is Rᵀ · lifted and
/// their covariance is already world-aligned.
pub fn project(scene: &HybridScene, frame: &Frame) -> Vec<SplatPrimitive> {
    let (w, h) = (frame.width(), frame.height());
    let intr = &frame.intrinsics;
    let r_wc = frame.pose.rotation.transpose(); // world -> camera
    let cam_center = frame.pose.camera_center();
    let mut out = Vec::with_capacity(scene.total_gaussians());

    let mut push = |world_pos: Vector3<f64>,
                    cov_world: nalgebra::Matrix3<f64>,
                    color: Vector3<f64>,
                    opacity_logit: f64,
                    family: Family,
                    source: usize| {
        let cam_pos = r_wc * (world_pos - cam_center);
        if cam_pos.z < NEAR_PLANE {
            return;
        }
        let mean2d = intr.project(&cam_pos);
        let j = pinhole_jacobian(intr.fx, intr.fy, &cam_pos); // 3x2: Jᵀ
        let u = j.transpose() * r_wc; // 2x3
        let mut cov2d = u * cov_world * u.transpose();
        cov2d[(0, 0)] += COV_REGULARIZATION;
        cov2d[(1, 1)] += COV_REGULARIZATION;
        // Symmetrize round-off.
        let c01 = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
        cov2d[(0, 1)] = c01;
        cov2d[(1, 0)] = c01;
        let Some(rect) = footprint(&mean2d, &cov2d, w, h) else {
            return;
        };
        let det = cov2d[(0, 0)] * cov2d[(1, 1)] - c01 * c01;
        if det <= 0.0 {
            return;
        }
        let inv = Matrix2::new(cov2d[(1, 1)], -c01, -c01, cov2d[(0, 0)]) / det;
        out.push(SplatPrimitive {
            mean2d,
            cov2d,
            inv_cov2d: inv,
            depth: cam_pos.z,
            color,
            opacity: sigmoid(opacity_logit),
            family,
            source,
            rect,
            cam_pos,
        });
    };

    for (i, g) in scene.free.iter().enumerate() {
        let q = crate::math::quat_normalize(&g.rotation);
        let cov = materialize_covariance(&q, &g.scale());
        push(g.position, cov, g.color, g.opacity, Family::Free, i);
    }
    for (i, g) in scene.plane.iter().enumerate() {
        let seg = &scene.segments[g.segment_id];
        let lifted = lift_plane(g, seg, scene.config.plane_thickness)
            .expect("plane segment is non-vertical by fit-time invariant");
        let cov = materialize_covariance(&lifted.rotation, &lifted.scale);
        push(lifted.position, cov, g.color, g.opacity, Family::Plane, i);
    }
    for (i, g) in scene.sky.iter().enumerate() {
        let lifted = lift_sphere(g, scene.config.sky_radius, scene.config.sky_thickness)
            .expect("sky footprint stays inside the disc by the step projection");
        // Sky frame: camera-centered, world-parallel axes.
        let world_pos = cam_center + lifted.position;
        let cov = materialize_covariance(&lifted.rotation, &lifted.scale);
        push(world_pos, cov, g.color, g.opacity, Family::Sky, i);
    }
    out
}

//! Analytic gradients for the rasterizer.
//!
//! Stage 1 replays each tile's front-to-back walk, accumulating gradients
//! w.r.t. per-primitive screen quantities (mean2d, cov2d, color, activated
//! opacity, depth). Stage 2 chains those through the EWA projection and,
//! for the constrained families, through the lift Jacobians down to the
//! stored learnable parameters.
//!
//! Tiles produce private partial buffers that are reduced in tile order, so
//! the result is bit-identical regardless of thread scheduling.

use nalgebra::{Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::img::{Image, ImageRgb};
use crate::ingest::Frame;
use crate::math::{
    quat_normalize, quat_normalize_backward, quat_to_matrix, quat_to_matrix_backward, Quat,
};
use crate::par::{map_indexed, Parallelism};
use crate::scene::{materialize_covariance, HybridScene};

use super::{
    Family, GradientBuffer, RenderOutput, SplatPrimitive, TILE_SIZE, TRANSMITTANCE_CUTOFF,
};

/// Gradient of one primitive *instance* w.r.t. its screen-space quantities.
#[derive(Clone, Copy, Default)]
struct InstanceGrad {
    mean2d: [f64; 2],
    /// (c00, c01, c11) with the off-diagonal parameter counted once.
    cov: [f64; 3],
    color: [f64; 3],
    opacity: f64,
    depth: f64,
}

/// Backward pass: propagate dL/dColor and dL/dDepth images into a
/// [`GradientBuffer`] over all learnable parameters, and accumulate
/// densification statistics for the free family.
pub fn backward(
    scene: &HybridScene,
    frame: &Frame,
    output: &RenderOutput,
    d_color: &ImageRgb,
    d_depth: &Image,
    grads: &mut GradientBuffer,
) -> Result<()> {
    backward_with(scene, frame, output, d_color, d_depth, grads, Parallelism::default())
}

pub fn backward_with(
    scene: &HybridScene,
    frame: &Frame,
    output: &RenderOutput,
    d_color: &ImageRgb,
    d_depth: &Image,
    grads: &mut GradientBuffer,
    par: Parallelism,
) -> Result<()> {
    if output.scene_revision != scene.revision() {
        return Err(Error::StaleState {
            expected: output.scene_revision,
            got: scene.revision(),
        });
    }
    let (w, h) = (frame.width(), frame.height());
    if d_color.shape() != (h, w) || d_depth.shape() != (h, w) {
        return Err(Error::DimensionMismatch {
            expected: (h, w),
            got: d_color.shape(),
        });
    }
    if !grads.matches(scene) {
        grads.resize_for(scene);
    }
    grads.zero_params();

    let prims = &output.primitives;

    // Stage 1: per-tile screen-space gradients.
    let n_tiles = output.tiles_x * output.tiles_y;
    let tile_grads: Vec<Vec<(u32, InstanceGrad)>> = map_indexed(par, n_tiles, |t| {
        let order = &output.tile_order[t];
        if order.is_empty() {
            return Vec::new();
        }
        let (tx, ty) = (t % output.tiles_x, t / output.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let tw = TILE_SIZE.min(w - x0);
        let th = TILE_SIZE.min(h - y0);
        let mut local: Vec<InstanceGrad> = vec![InstanceGrad::default(); order.len()];
        // (position in order, f, transmittance before)
        let mut chain: Vec<(usize, f64, f64)> = Vec::with_capacity(order.len());
        for dy in 0..th {
            for dx in 0..tw {
                let (u, v) = (x0 + dx, y0 + dy);
                let dc = d_color.at(u, v);
                let dd = d_depth.at(u, v);
                if dc == [0.0; 3] && dd == 0.0 {
                    continue;
                }
                let pixel = Vector2::new(u as f64 + 0.5, v as f64 + 0.5);
                chain.clear();
                let mut transmittance = 1.0f64;
                for (k, &idx) in order.iter().enumerate() {
                    let p = &prims[idx as usize];
                    if !p.rect.contains(u as i64, v as i64) {
                        continue;
                    }
                    let d = pixel - p.mean2d;
                    let e = p.inv_cov2d[(0, 0)] * d.x * d.x
                        + 2.0 * p.inv_cov2d[(0, 1)] * d.x * d.y
                        + p.inv_cov2d[(1, 1)] * d.y * d.y;
                    let f = p.opacity * (-0.5 * e).exp();
                    if f < 1e-12 {
                        continue;
                    }
                    chain.push((k, f, transmittance));
                    transmittance *= 1.0 - f;
                    if transmittance < TRANSMITTANCE_CUTOFF {
                        break;
                    }
                }
                // Reverse scan through the compositing recurrence.
                let mut g_t = 0.0f64;
                for &(k, f, t_before) in chain.iter().rev() {
                    let p = &prims[order[k] as usize];
                    let phi = dc[0] * p.color.x + dc[1] * p.color.y + dc[2] * p.color.z
                        + dd * p.depth;
                    let d_f = t_before * (phi - g_t);
                    g_t = f * phi + (1.0 - f) * g_t;
                    let weight = f * t_before;
                    let lg = &mut local[k];
                    lg.color[0] += dc[0] * weight;
                    lg.color[1] += dc[1] * weight;
                    lg.color[2] += dc[2] * weight;
                    lg.depth += dd * weight;
                    // f = alpha * G; G = exp(-e/2).
                    let g_val = f / p.opacity;
                    lg.opacity += g_val * d_f;
                    let val = p.opacity * d_f * g_val; // alpha * dL/df * G
                    let d = pixel - p.mean2d;
                    let ex = p.inv_cov2d[(0, 0)] * d.x + p.inv_cov2d[(0, 1)] * d.y;
                    let ey = p.inv_cov2d[(0, 1)] * d.x + p.inv_cov2d[(1, 1)] * d.y;
                    lg.mean2d[0] += val * ex;
                    lg.mean2d[1] += val * ey;
                    lg.cov[0] += 0.5 * val * ex * ex;
                    lg.cov[1] += val * ex * ey;
                    lg.cov[2] += 0.5 * val * ey * ey;
                }
            }
        }
        order
            .iter()
            .zip(local)
            .map(|(&idx, g)| (idx, g))
            .collect()
    });

    // Deterministic reduction into per-primitive accumulators.
    let mut acc: Vec<InstanceGrad> = vec![InstanceGrad::default(); prims.len()];
    for tile in tile_grads {
        for (idx, g) in tile {
            let a = &mut acc[idx as usize];
            a.mean2d[0] += g.mean2d[0];
            a.mean2d[1] += g.mean2d[1];
            for k in 0..3 {
                a.cov[k] += g.cov[k];
                a.color[k] += g.color[k];
            }
            a.opacity += g.opacity;
            a.depth += g.depth;
        }
    }

    // Stage 2: chain through projection and lifting to stored parameters.
    let r_pose = frame.pose.rotation;
    let r_wc = r_pose.transpose();
    let intr = &frame.intrinsics;
    for (p, ig) in prims.iter().zip(&acc) {
        let dmean = Vector2::new(ig.mean2d[0], ig.mean2d[1]);
        if p.family == Family::Free {
            grads.stats.grad2d_norm[p.source] += dmean.norm();
            grads.stats.observations[p.source] += 1;
        }

        let cam = p.cam_pos;
        let z_inv = 1.0 / cam.z;
        let z_inv2 = z_inv * z_inv;
        // Jᵀ as 3x2 (same block the projection used).
        let j_t = Matrix3x2::new(
            intr.fx * z_inv,
            0.0,
            0.0,
            intr.fy * z_inv,
            -intr.fx * cam.x * z_inv2,
            -intr.fy * cam.y * z_inv2,
        );
        let u_mat = j_t.transpose() * r_wc; // 2x3

        // Recover the world covariance (cov2d minus dilation is U Σ Uᵀ).
        let (sigma_world, rot_world, scale) = world_covariance(scene, p);

        let m_g = Matrix2::new(ig.cov[0], ig.cov[1] * 0.5, ig.cov[1] * 0.5, ig.cov[2]);
        let d_sigma_world = u_mat.transpose() * m_g * u_mat; // 3x3 symmetric
        let d_u = 2.0 * m_g * u_mat * sigma_world; // 2x3
        let d_j = d_u * r_pose.transpose().transpose(); // dL/dJ = dU · Wᵀ, W = Rᵀ
        // (W = r_wc, so Wᵀ = r_pose.)

        // Camera-position gradient: projection of the mean...
        let mut d_cam = j_t * dmean;
        // ...plus the Jacobian's own dependence on (x,y,z)...
        d_cam.x += d_j[(0, 2)] * (-intr.fx * z_inv2);
        d_cam.y += d_j[(1, 2)] * (-intr.fy * z_inv2);
        d_cam.z += d_j[(0, 0)] * (-intr.fx * z_inv2)
            + d_j[(1, 1)] * (-intr.fy * z_inv2)
            + d_j[(0, 2)] * (2.0 * intr.fx * cam.x * z_inv2 * z_inv)
            + d_j[(1, 2)] * (2.0 * intr.fy * cam.y * z_inv2 * z_inv);
        // ...plus the per-Gaussian depth.
        d_cam.z += ig.depth;
        let d_world = r_pose * d_cam;

        // Σ_world = R D Rᵀ with D = diag(s²).
        let d_big = Matrix3::from_diagonal(&scale.map(|s| s * s));
        let d_rot = 2.0 * d_sigma_world * rot_world * d_big;
        let d_scale = Vector3::new(
            2.0 * scale.x * (rot_world.column(0).dot(&(d_sigma_world * rot_world.column(0)))),
            2.0 * scale.y * (rot_world.column(1).dot(&(d_sigma_world * rot_world.column(1)))),
            2.0 * scale.z * (rot_world.column(2).dot(&(d_sigma_world * rot_world.column(2)))),
        );

        let d_opacity_logit = ig.opacity * p.opacity * (1.0 - p.opacity);
        let d_color_vec = Vector3::new(ig.color[0], ig.color[1], ig.color[2]);

        match p.family {
            Family::Free => {
                let g = &scene.free[p.source];
                let out = &mut grads.free[p.source];
                out.position += d_world;
                for k in 0..3 {
                    out.log_scale[k] += d_scale[k] * scale[k];
                }
                out.color += d_color_vec;
                out.opacity += d_opacity_logit;
                let unit = quat_normalize(&g.rotation);
                let d_unit = quat_to_matrix_backward(&unit, &d_rot);
                out.rotation += quat_normalize_backward(&g.rotation, &d_unit);
            }
            Family::Plane => {
                let g = &scene.plane[p.source];
                let seg = &scene.segments[g.segment_id];
                let (a, b, c) = (
                    seg.coefficients.x,
                    seg.coefficients.y,
                    seg.coefficients.z,
                );
                let out = &mut grads.plane[p.source];
                out.xz.x += d_world.x + d_world.y * (-a / b);
                out.xz.y += d_world.z + d_world.y * (-c / b);
                out.log_scale_xz.x += d_scale.x * scale.x;
                out.log_scale_xz.y += d_scale.z * scale.z;
                out.color += d_color_vec;
                out.opacity += d_opacity_logit;
                // Rotation is a constant of the fitted plane: no parameter
                // receives its gradient.
            }
            Family::Sky => {
                let g = &scene.sky[p.source];
                let r = scene.config.sky_radius;
                let (x, z) = (g.xz.x, g.xz.y);
                let y = (r * r - x * x - z * z).sqrt();
                let out = &mut grads.sky[p.source];
                out.xz.x += d_world.x + d_world.y * (-x / y);
                out.xz.y += d_world.z + d_world.y * (-z / y);
                // Radial alignment: q = normalize(R + y, z, 0, -x).
                let raw = Quat::new(r + y, z, 0.0, -x);
                let unit = quat_normalize(&raw);
                let d_unit = quat_to_matrix_backward(&unit, &d_rot);
                let d_raw = quat_normalize_backward(&raw, &d_unit);
                out.xz.x += d_raw[0] * (-x / y) - d_raw[3];
                out.xz.y += d_raw[0] * (-z / y) + d_raw[1];
                out.log_scale_xz.x += d_scale.x * scale.x;
                out.log_scale_xz.y += d_scale.z * scale.z;
                out.color += d_color_vec;
                out.opacity += d_opacity_logit;
            }
        }
    }
    Ok(())
}

/// World-frame covariance context of a projected primitive:
/// (Σ_world, rotation matrix, activated scales).
fn world_covariance(
    scene: &HybridScene,
    p: &SplatPrimitive,
) -> (Matrix3<f64>, Matrix3<f64>, Vector3<f64>) {
    match p.family {
        Family::Free => {
            let g = &scene.free[p.source];
            let q = quat_normalize(&g.rotation);
            let s = g.scale();
            (materialize_covariance(&q, &s), quat_to_matrix(&q), s)
        }
        Family::Plane => {
            let g = &scene.plane[p.source];
            let seg = &scene.segments[g.segment_id];
            let lifted =
                crate::scene::lift_plane(g, seg, scene.config.plane_thickness).expect("projected");
            (
                materialize_covariance(&lifted.rotation, &lifted.scale),
                quat_to_matrix(&lifted.rotation),
                lifted.scale,
            )
        }
        Family::Sky => {
            let g = &scene.sky[p.source];
            let lifted =
                crate::scene::lift_sphere(g, scene.config.sky_radius, scene.config.sky_thickness)
                    .expect("projected");
            (
                materialize_covariance(&lifted.rotation, &lifted.scale),
                quat_to_matrix(&lifted.rotation),
                lifted.scale,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::{Image, ImageRgb};
    use crate::rasterizer::render;
    use crate::testutil::{
        analytic_flat, gradcheck_frame, linear_loss, mixed_scene, param_refs, random_weights,
    };

    #[test]
    fn gradients_match_finite_differences() {
        let mut scene = mixed_scene(31);
        let frame = gradcheck_frame(32, 32);
        let (wc, wd) = random_weights(32, 32, 77);

        let out = render(&scene, &frame);
        let mut grads = GradientBuffer::for_scene(&scene);
        backward(&scene, &frame, &out, &wc, &wd, &mut grads).unwrap();
        let analytic = analytic_flat(&grads);

        // The sky family comes after free in the flattening used by both
        // param_refs and analytic_flat (free, sky, plane).
        let refs = param_refs(&mut scene);
        assert_eq!(refs.len(), analytic.len());
        let h = 1e-4;
        let mut n_bad = 0usize;
        let mut worst = 0.0f64;
        for (i, r) in refs.iter().enumerate() {
            let fd = unsafe {
                let orig = **r;
                **r = orig + h;
                let lp = {
                    let o = render(&scene, &frame);
                    linear_loss(&o.color, &o.depth, &wc, &wd)
                };
                **r = orig - h;
                let lm = {
                    let o = render(&scene, &frame);
                    linear_loss(&o.color, &o.depth, &wc, &wd)
                };
                **r = orig;
                (lp - lm) / (2.0 * h)
            };
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
            if rel > 1e-3 {
                n_bad += 1;
            }
            worst = worst.max(rel);
        }
        let frac_ok = 1.0 - n_bad as f64 / analytic.len() as f64;
        assert!(frac_ok >= 0.95, "only {frac_ok:.3} of params within 1e-3");
        assert!(worst < 1e-2, "worst relative error {worst:.2e}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let scene = mixed_scene(5);
        let frame = gradcheck_frame(32, 32);
        let out = render(&scene, &frame);
        let mut grads = GradientBuffer::for_scene(&scene);
        let wc = ImageRgb::zeros(32, 32);
        let wd = Image::zeros(32, 32);
        backward(&scene, &frame, &out, &wc, &wd, &mut grads).unwrap();
        for v in analytic_flat(&grads) {
            assert_eq!(v, 0.0);
        }
        for v in &grads.stats.grad2d_norm {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn stale_scene_is_rejected() {
        let mut scene = mixed_scene(5);
        let frame = gradcheck_frame(32, 32);
        let out = render(&scene, &frame);
        scene.bump_revision();
        let mut grads = GradientBuffer::for_scene(&scene);
        let wc = ImageRgb::zeros(32, 32);
        let wd = Image::zeros(32, 32);
        assert!(matches!(
            backward(&scene, &frame, &out, &wc, &wd, &mut grads),
            Err(Error::StaleState { .. })
        ));
    }

    #[test]
    fn plane_gradient_lives_in_two_dof() {
        // The stored gradient for a road Gaussian is (x,z) only; the lifted
        // normal component is folded through the constraint by construction.
        let scene = mixed_scene(5);
        let frame = gradcheck_frame(32, 32);
        let (wc, wd) = random_weights(32, 32, 3);
        let out = render(&scene, &frame);
        let mut grads = GradientBuffer::for_scene(&scene);
        backward(&scene, &frame, &out, &wc, &wd, &mut grads).unwrap();
        assert_eq!(grads.plane.len(), 1);
        assert!(grads.plane[0].xz.norm() > 0.0);
    }

    #[test]
    fn sequential_and_parallel_backward_agree() {
        let scene = mixed_scene(13);
        let frame = gradcheck_frame(32, 32);
        let (wc, wd) = random_weights(32, 32, 9);
        let out = render(&scene, &frame);
        let mut g1 = GradientBuffer::for_scene(&scene);
        let mut g2 = GradientBuffer::for_scene(&scene);
        backward_with(&scene, &frame, &out, &wc, &wd, &mut g1, Parallelism::Sequential).unwrap();
        backward(&scene, &frame, &out, &wc, &wd, &mut g2).unwrap();
        assert_eq!(analytic_flat(&g1), analytic_flat(&g2));
    }
}

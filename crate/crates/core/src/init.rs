//! Seeding Gaussians from LiDAR points and from feature-point depths:
//! two-view midpoint triangulation for well-moving features, a calibrated
//! tan(theta)/flow approximation for slow ones, silhouette-gated placement,
//! and sky-dome spawning.

use std::collections::{HashMap, HashSet};

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::ingest::{Correspondence, Frame};
use crate::math::{logit, pixel_center, Intrinsics, Pose, QUAT_IDENTITY};
use crate::rasterizer::RenderOutput;
use crate::scene::{FreeGaussian, HybridScene, PlaneGaussian, SphereGaussian};

/// Rays closer than this angle (radians) are considered parallel.
const MIN_RAY_ANGLE: f64 = 1e-5;
/// Lower clamp for the ray angle in the depth approximation (1 degree).
const MIN_THETA: f64 = std::f64::consts::PI / 180.0;
/// Sky spawn grid cell size, degrees.
const SKY_GRID_DEG: f64 = 1.5;
/// Lowest spawnable sky-frame elevation (sine). The optimizer re-projects
/// footprints to 0.999R, i.e. y >= 0.0447R; spawning below that would just
/// snap up on the first step. Near-horizon directions clamp onto this rim.
const MIN_SKY_Y: f64 = 0.046;
/// Rim cells get wider footprints so coverage reaches elevation zero.
const RIM_SKY_Y: f64 = 0.12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthSource {
    Triangulated,
    Approximated,
}

/// A feature pixel with an estimated depth.
#[derive(Clone, Copy, Debug)]
pub struct DepthEstimate {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub source: DepthSource,
    /// Angle between the pixel ray and the optical axis, radians.
    pub angle: f64,
}

/// Midpoint triangulation of a correspondence: the frame-t camera-frame z
/// of the midpoint of the closest points of the two rays.
pub fn triangulate(
    corr: &Correspondence,
    pose_t: &Pose,
    pose_t1: &Pose,
    intr: &Intrinsics,
) -> Result<f64> {
    let o1 = pose_t.camera_center();
    let o2 = pose_t1.camera_center();
    if (o2 - o1).norm() < 1e-9 {
        return Err(Error::DegenerateRays);
    }
    let d1 = pose_t.dir_to_world(&intr.ray_dir(&corr.pixel_t)).normalize();
    let d2 = pose_t1
        .dir_to_world(&intr.ray_dir(&corr.pixel_t1))
        .normalize();
    let cos_angle = d1.dot(&d2).clamp(-1.0, 1.0);
    if cos_angle.acos() < MIN_RAY_ANGLE {
        return Err(Error::DegenerateRays);
    }
    // Closest points: minimize |(o1 + s d1) - (o2 + t d2)|.
    let w = o1 - o2;
    let b = d1.dot(&d2);
    let d = d1.dot(&w);
    let e = d2.dot(&w);
    let denom = 1.0 - b * b;
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    let midpoint = ((o1 + d1 * s) + (o2 + d2 * t)) * 0.5;
    let z = pose_t.world_to_cam(&midpoint).z;
    if z <= 0.0 {
        return Err(Error::BehindCamera);
    }
    Ok(z)
}

/// Eq-style distant-point depth: d = C · tan(theta) / flow, with theta
/// clamped away from zero.
pub fn approximate_depth(theta: f64, flow: f64, constant: f64) -> f64 {
    constant * theta.max(MIN_THETA).tan() / flow
}

/// Calibrate the approximation constant as the median of d·flow/tan(theta)
/// over triangulated estimates with flow in [f_th, 2 f_th]; falls back to
/// `fallback` when fewer than 5 such points exist.
pub fn calibrate_depth_constant(
    triangulated: &[(f64, f64, f64)], // (depth, flow, theta)
    flow_threshold: f64,
    fallback: f64,
) -> f64 {
    let mut cs: Vec<f64> = triangulated
        .iter()
        .filter(|(_, flow, _)| *flow >= flow_threshold && *flow <= 2.0 * flow_threshold)
        .map(|(d, flow, theta)| d * flow / theta.max(MIN_THETA).tan())
        .collect();
    if cs.len() < 5 {
        return fallback;
    }
    cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cs[cs.len() / 2]
}

/// Turn correspondences into depth estimates: triangulate fast features,
/// approximate slow ones with the per-frame calibrated constant. Estimates
/// beyond `max_depth` are dropped — the approximation diverges as flow
/// approaches zero, and seeds behind the sky sphere would break the
/// front-to-back family ordering.
pub fn estimate_depths(
    corrs: &[Correspondence],
    pose_t: &Pose,
    pose_t1: &Pose,
    intr: &Intrinsics,
    flow_threshold: f64,
    fallback_constant: f64,
    max_depth: f64,
) -> Vec<DepthEstimate> {
    let mut out = Vec::with_capacity(corrs.len());
    let mut calib_samples = Vec::new();
    let mut slow = Vec::new();
    for corr in corrs {
        let theta = intr.ray_angle(&corr.pixel_t);
        if corr.flow >= flow_threshold {
            match triangulate(corr, pose_t, pose_t1, intr) {
                Ok(depth) if depth <= max_depth => {
                    calib_samples.push((depth, corr.flow, theta));
                    out.push(DepthEstimate {
                        pixel: corr.pixel_t,
                        depth,
                        source: DepthSource::Triangulated,
                        angle: theta,
                    });
                }
                Ok(_) => {}
                Err(Error::DegenerateRays) => slow.push((corr, theta)),
                Err(_) => {} // behind camera: drop
            }
        } else if corr.flow > 0.05 {
            slow.push((corr, theta));
        }
    }
    let constant = calibrate_depth_constant(&calib_samples, flow_threshold, fallback_constant);
    for (corr, theta) in slow {
        let depth = approximate_depth(theta, corr.flow, constant);
        if depth.is_finite() && depth > 0.0 && depth <= max_depth {
            out.push(DepthEstimate {
                pixel: corr.pixel_t,
                depth,
                source: DepthSource::Approximated,
                angle: theta,
            });
        }
    }
    out
}

/// Median absolute error between the rendered depth and a frame's sparse
/// depth samples (the 50-MDE seeding gate).
pub fn median_depth_error(prior: &RenderOutput, frame: &Frame) -> f64 {
    let mut errs: Vec<f64> = frame
        .sparse_depth
        .iter()
        .map(|s| (prior.depth.at(s.u, s.v) - s.depth).abs())
        .collect();
    if errs.is_empty() {
        return f64::INFINITY;
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    errs[errs.len() / 2]
}

/// Seed new Gaussians from LiDAR samples and feature-depth estimates,
/// gated by the prior render's silhouette (S < S_th) or a gross depth error
/// (> 50·MDE). Points within the road-plane threshold become constrained
/// road Gaussians; everything else becomes a free Gaussian.
///
/// `prior` is the scene rendered from this frame's pose *before* seeding;
/// pass `None` for the first frame (empty silhouette).
pub fn seed_from_frame(
    scene: &mut HybridScene,
    frame: &Frame,
    estimates: &[DepthEstimate],
    prior: Option<&RenderOutput>,
) -> usize {
    let (w, h) = (frame.width(), frame.height());
    // One candidate per pixel; LiDAR wins over feature estimates.
    let mut candidates: HashMap<(usize, usize), f64> = HashMap::new();
    for e in estimates {
        let (u, v) = (e.pixel.x.floor() as usize, e.pixel.y.floor() as usize);
        if u < w && v < h {
            candidates.entry((u, v)).or_insert(e.depth);
        }
    }
    for s in &frame.sparse_depth {
        candidates.insert((s.u, s.v), s.depth);
    }

    let mde = prior.map(|p| median_depth_error(p, frame));
    let s_th = scene.config.silhouette_add;
    let d_th = scene.config.plane_distance_threshold;
    let segment = scene
        .segment_for_frame(frame.index)
        .map(|(id, seg)| (id, seg.clone()));

    let mut keys: Vec<(usize, usize)> = candidates.keys().copied().collect();
    keys.sort_unstable();
    let mut added = 0usize;
    for (u, v) in keys {
        let depth = candidates[&(u, v)];
        if frame.is_sky(u, v) {
            continue;
        }
        if let Some(p) = prior {
            let covered = p.silhouette.at(u, v) >= s_th;
            let gross_error = (p.depth.at(u, v) - depth).abs() > 50.0 * mde.unwrap();
            if covered && !gross_error {
                continue;
            }
        }
        let world = frame
            .pose
            .cam_to_world(&frame.intrinsics.back_project(&pixel_center(u, v), depth));
        let [r, g, b] = frame.rgb.at(u, v);
        let color = Vector3::new(r, g, b);
        // Roughly a one-pixel footprint, capped below the scale-prune
        // threshold so distant newborns are not removed on arrival.
        let radius = (2.0 * depth / frame.intrinsics.fx)
            .min(0.8 * scene.config.prune_scale)
            .max(1e-4);
        let log_radius = radius.ln();
        let on_plane = segment
            .as_ref()
            .map(|(_, seg)| seg.signed_distance(&world).abs() < d_th)
            .unwrap_or(false);
        if on_plane {
            let (seg_id, _) = segment.as_ref().unwrap();
            scene.plane.push(PlaneGaussian {
                xz: Vector2::new(world.x, world.z),
                log_scale_xz: Vector2::new(log_radius, log_radius),
                color,
                opacity: logit(0.5),
                segment_id: *seg_id,
            });
        } else {
            scene.free.push(FreeGaussian {
                position: world,
                log_scale: Vector3::from_element(log_radius),
                color,
                rotation: QUAT_IDENTITY,
                opacity: logit(0.5),
            });
        }
        added += 1;
    }
    if added > 0 {
        scene.bump_revision();
    }
    added
}

fn sky_cell(dir: &Vector3<f64>) -> (i64, i64) {
    let cell = SKY_GRID_DEG.to_radians();
    let azimuth = dir.x.atan2(dir.z);
    let elevation = dir.y.asin();
    ((azimuth / cell).floor() as i64, (elevation / cell).floor() as i64)
}

/// Spawn sky Gaussians at ray-sphere intersections for uncovered sky
/// pixels, deduplicated on an angular grid (against both existing sky
/// Gaussians and within this call).
pub fn spawn_sky(scene: &mut HybridScene, frame: &Frame, prior: Option<&RenderOutput>) -> usize {
    let Some(mask) = &frame.sky_mask else {
        return 0;
    };
    let r = scene.config.sky_radius;
    let mut occupied: HashSet<(i64, i64)> = HashSet::new();
    for g in &scene.sky {
        let d2 = g.xz.norm_squared();
        let y = (r * r - d2).max(0.0).sqrt();
        let dir = Vector3::new(g.xz.x, y, g.xz.y) / r;
        occupied.insert(sky_cell(&dir));
    }
    let s_th = scene.config.silhouette_add;
    let cell_arc = r * SKY_GRID_DEG.to_radians();
    let mut added = 0usize;
    for v in 0..frame.height() {
        for u in 0..frame.width() {
            if !mask.at(u, v) {
                continue;
            }
            if let Some(p) = prior {
                if p.silhouette.at(u, v) >= s_th {
                    continue;
                }
            }
            // Sky frame shares world axes; translation is irrelevant for
            // directions.
            let mut dir = frame
                .pose
                .dir_to_world(&frame.intrinsics.ray_dir(&pixel_center(u, v)))
                .normalize();
            if dir.y < -0.05 {
                continue; // far below the horizon: not representable
            }
            if dir.y < MIN_SKY_Y {
                // Clamp onto the rim, keeping the azimuth.
                let horizontal = (1.0 - MIN_SKY_Y * MIN_SKY_Y).sqrt();
                let xz_norm = Vector2::new(dir.x, dir.z).norm().max(1e-9);
                dir = Vector3::new(
                    dir.x / xz_norm * horizontal,
                    MIN_SKY_Y,
                    dir.z / xz_norm * horizontal,
                );
            }
            let cell = sky_cell(&dir);
            if occupied.contains(&cell) {
                continue;
            }
            occupied.insert(cell);
            let [cr, cg, cb] = frame.rgb.at(u, v);
            let scale = if dir.y < RIM_SKY_Y {
                1.3 * cell_arc
            } else {
                0.7 * cell_arc
            };
            scene.sky.push(SphereGaussian {
                xz: Vector2::new(dir.x * r, dir.z * r),
                log_scale_xz: Vector2::from_element(scale.ln()),
                color: Vector3::new(cr, cg, cb),
                opacity: logit(0.5),
            });
            added += 1;
        }
    }
    if added > 0 {
        scene.bump_revision();
    }
    added
}

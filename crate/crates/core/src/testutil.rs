//! Shared fixtures for unit tests: a small mixed-family scene, a simple
//! camera, and flattening helpers for finite-difference checks.

use nalgebra::{Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::img::{Image, ImageRgb};
use crate::ingest::Frame;
use crate::math::{logit, Intrinsics, Pose, Quat};
use crate::rasterizer::GradientBuffer;
use crate::scene::{
    FreeGaussian, HybridScene, PlaneGaussian, PlaneSegment, SceneConfig, SphereGaussian,
};

pub fn gradcheck_frame(w: usize, h: usize) -> Frame {
    Frame {
        index: 0,
        rgb: ImageRgb::zeros(w, h),
        sparse_depth: vec![],
        pose: Pose::identity(),
        intrinsics: Intrinsics {
            fx: 30.0,
            fy: 30.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
        },
        sky_mask: None,
        gt_depth: None,
    }
}

fn unit_plane(a: f64, b: f64, c: f64, d: f64) -> Vector4<f64> {
    let n = (a * a + b * b + c * c).sqrt();
    Vector4::new(a / n, b / n, c / n, d / n)
}

/// A small scene with at least one Gaussian of each family, in front of an
/// identity camera.
pub fn mixed_scene(seed: u64) -> HybridScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut config = SceneConfig::default();
    config.sky_radius = 900.0;
    config.sky_thickness = 1.0;
    config.plane_thickness = 0.01;
    let mut scene = HybridScene::new(config);
    for _ in 0..2 {
        scene.free.push(FreeGaussian {
            position: Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.2),
                rng.gen_range(4.0..7.0),
            ),
            log_scale: Vector3::new(
                rng.gen_range(0.2..0.5f64).ln(),
                rng.gen_range(0.2..0.5f64).ln(),
                rng.gen_range(0.2..0.5f64).ln(),
            ),
            color: Vector3::new(rng.gen_range(0.2..0.9), 0.4, rng.gen_range(0.2..0.9)),
            rotation: Quat::new(
                1.0,
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            ),
            opacity: logit(rng.gen_range(0.35..0.75)),
        });
    }
    scene.segments.push(PlaneSegment {
        coefficients: unit_plane(0.03, 1.0, -0.02, -1.8),
        valid_range: (0, usize::MAX),
    });
    scene.plane.push(PlaneGaussian {
        xz: Vector2::new(0.3, 5.0),
        log_scale_xz: Vector2::new(0.6f64.ln(), 0.8f64.ln()),
        color: Vector3::new(0.45, 0.42, 0.40),
        opacity: logit(0.6),
        segment_id: 0,
    });
    for k in 0..2 {
        scene.sky.push(SphereGaussian {
            xz: Vector2::new(
                rng.gen_range(-60.0..60.0),
                700.0 + 40.0 * k as f64 + rng.gen_range(-10.0..10.0),
            ),
            log_scale_xz: Vector2::new(28.0f64.ln(), 33.0f64.ln()),
            color: Vector3::new(0.5, 0.6, rng.gen_range(0.7..0.95)),
            opacity: logit(0.55),
        });
    }
    scene
}

/// Scalar test loss: fixed upstream images contracted with the rendered
/// color and depth; its gradient images are the upstream weights.
pub fn linear_loss(out_c: &ImageRgb, out_d: &Image, wc: &ImageRgb, wd: &Image) -> f64 {
    let mut l = 0.0;
    for (a, b) in out_c.data().iter().zip(wc.data()) {
        l += a * b;
    }
    for (a, b) in out_d.data().iter().zip(wd.data()) {
        l += a * b;
    }
    l
}

pub fn random_weights(w: usize, h: usize, seed: u64) -> (ImageRgb, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wc = ImageRgb::zeros(w, h);
    let mut wd = Image::zeros(w, h);
    for v in wc.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for v in wd.data_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    (wc, wd)
}

/// Pointers to every learnable scalar, in the order free, sky, plane
/// (matching [`analytic_flat`]). For finite differencing in tests.
pub fn param_refs(scene: &mut HybridScene) -> Vec<*mut f64> {
    let mut refs: Vec<*mut f64> = Vec::new();
    for g in &mut scene.free {
        for k in 0..3 {
            refs.push(&mut g.position[k]);
        }
        for k in 0..3 {
            refs.push(&mut g.log_scale[k]);
        }
        for k in 0..3 {
            refs.push(&mut g.color[k]);
        }
        for k in 0..4 {
            refs.push(&mut g.rotation[k]);
        }
        refs.push(&mut g.opacity);
    }
    for g in &mut scene.sky {
        refs.push(&mut g.xz.x);
        refs.push(&mut g.xz.y);
        refs.push(&mut g.log_scale_xz.x);
        refs.push(&mut g.log_scale_xz.y);
        for k in 0..3 {
            refs.push(&mut g.color[k]);
        }
        refs.push(&mut g.opacity);
    }
    for g in &mut scene.plane {
        refs.push(&mut g.xz.x);
        refs.push(&mut g.xz.y);
        refs.push(&mut g.log_scale_xz.x);
        refs.push(&mut g.log_scale_xz.y);
        for k in 0..3 {
            refs.push(&mut g.color[k]);
        }
        refs.push(&mut g.opacity);
    }
    refs
}

/// Flatten a gradient buffer in the same order as [`param_refs`].
pub fn analytic_flat(grads: &GradientBuffer) -> Vec<f64> {
    let mut flat = Vec::new();
    for g in &grads.free {
        flat.extend_from_slice(g.position.as_slice());
        flat.extend_from_slice(g.log_scale.as_slice());
        flat.extend_from_slice(g.color.as_slice());
        flat.extend_from_slice(g.rotation.as_slice());
        flat.push(g.opacity);
    }
    for g in grads.sky.iter().chain(&grads.plane) {
        flat.extend_from_slice(g.xz.as_slice());
        flat.extend_from_slice(g.log_scale_xz.as_slice());
        flat.extend_from_slice(g.color.as_slice());
        flat.push(g.opacity);
    }
    flat
}

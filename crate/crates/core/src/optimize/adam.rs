//! First/second-moment adaptive parameter updates with per-group learning
//! rates, plus the post-step constraint projections (quaternion
//! renormalization, sky-disc re-projection, color clamping).

use crate::error::{Error, Result};
use crate::rasterizer::{ConstrainedGrad, FreeGrad, GradientBuffer};
use crate::scene::{FreeGaussian, HybridScene, PlaneGaussian, SphereGaussian};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Flat layouts: free = [position 3 | log_scale 3 | color 3 | rotation 4 |
/// opacity 1], constrained = [xz 2 | log_scale 2 | color 3 | opacity 1].
pub const FREE_DIM: usize = 14;
pub const CON_DIM: usize = 8;

fn free_params(g: &FreeGaussian) -> [f64; FREE_DIM] {
    [
        g.position.x,
        g.position.y,
        g.position.z,
        g.log_scale.x,
        g.log_scale.y,
        g.log_scale.z,
        g.color.x,
        g.color.y,
        g.color.z,
        g.rotation[0],
        g.rotation[1],
        g.rotation[2],
        g.rotation[3],
        g.opacity,
    ]
}

fn set_free_params(g: &mut FreeGaussian, p: &[f64; FREE_DIM]) {
    g.position.x = p[0];
    g.position.y = p[1];
    g.position.z = p[2];
    g.log_scale.x = p[3];
    g.log_scale.y = p[4];
    g.log_scale.z = p[5];
    g.color.x = p[6];
    g.color.y = p[7];
    g.color.z = p[8];
    g.rotation[0] = p[9];
    g.rotation[1] = p[10];
    g.rotation[2] = p[11];
    g.rotation[3] = p[12];
    g.opacity = p[13];
}

fn free_grads(g: &FreeGrad) -> [f64; FREE_DIM] {
    [
        g.position.x,
        g.position.y,
        g.position.z,
        g.log_scale.x,
        g.log_scale.y,
        g.log_scale.z,
        g.color.x,
        g.color.y,
        g.color.z,
        g.rotation[0],
        g.rotation[1],
        g.rotation[2],
        g.rotation[3],
        g.opacity,
    ]
}

fn con_params_sky(g: &SphereGaussian) -> [f64; CON_DIM] {
    [
        g.xz.x,
        g.xz.y,
        g.log_scale_xz.x,
        g.log_scale_xz.y,
        g.color.x,
        g.color.y,
        g.color.z,
        g.opacity,
    ]
}

fn set_con_params_sky(g: &mut SphereGaussian, p: &[f64; CON_DIM]) {
    g.xz.x = p[0];
    g.xz.y = p[1];
    g.log_scale_xz.x = p[2];
    g.log_scale_xz.y = p[3];
    g.color.x = p[4];
    g.color.y = p[5];
    g.color.z = p[6];
    g.opacity = p[7];
}

fn con_params_plane(g: &PlaneGaussian) -> [f64; CON_DIM] {
    [
        g.xz.x,
        g.xz.y,
        g.log_scale_xz.x,
        g.log_scale_xz.y,
        g.color.x,
        g.color.y,
        g.color.z,
        g.opacity,
    ]
}

fn set_con_params_plane(g: &mut PlaneGaussian, p: &[f64; CON_DIM]) {
    g.xz.x = p[0];
    g.xz.y = p[1];
    g.log_scale_xz.x = p[2];
    g.log_scale_xz.y = p[3];
    g.color.x = p[4];
    g.color.y = p[5];
    g.color.z = p[6];
    g.opacity = p[7];
}

fn con_grads(g: &ConstrainedGrad) -> [f64; CON_DIM] {
    [
        g.xz.x,
        g.xz.y,
        g.log_scale_xz.x,
        g.log_scale_xz.y,
        g.color.x,
        g.color.y,
        g.color.z,
        g.opacity,
    ]
}

/// Per-scalar learning rates for one family layout.
fn free_lrs(scene: &HybridScene) -> [f64; FREE_DIM] {
    let c = &scene.config;
    let pos = c.lr_position * c.scene_extent;
    [
        pos,
        pos,
        pos,
        c.lr_scale,
        c.lr_scale,
        c.lr_scale,
        c.lr_color,
        c.lr_color,
        c.lr_color,
        c.lr_rotation,
        c.lr_rotation,
        c.lr_rotation,
        c.lr_rotation,
        c.lr_opacity,
    ]
}

fn con_lrs(scene: &HybridScene) -> [f64; CON_DIM] {
    let c = &scene.config;
    let pos = c.lr_position * c.scene_extent;
    [
        pos,
        pos,
        c.lr_scale,
        c.lr_scale,
        c.lr_color,
        c.lr_color,
        c.lr_color,
        c.lr_opacity,
    ]
}

/// Optimizer state: first and second moments aligned with the scene's
/// Gaussian vectors, resized alongside every densify/prune/seed event.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub step_count: u64,
    pub skipped_nonfinite: u64,
    free_m: Vec<[f64; FREE_DIM]>,
    free_v: Vec<[f64; FREE_DIM]>,
    sky_m: Vec<[f64; CON_DIM]>,
    sky_v: Vec<[f64; CON_DIM]>,
    plane_m: Vec<[f64; CON_DIM]>,
    plane_v: Vec<[f64; CON_DIM]>,
}

impl Adam {
    pub fn for_scene(scene: &HybridScene) -> Self {
        let mut a = Adam::default();
        a.resize_for(scene);
        a
    }

    pub fn matches(&self, scene: &HybridScene) -> bool {
        self.free_m.len() == scene.free.len()
            && self.sky_m.len() == scene.sky.len()
            && self.plane_m.len() == scene.plane.len()
    }

    /// Grow (zero-moment) or shrink to match the scene's counts. Used after
    /// seeding/spawning where new Gaussians append at the end.
    pub fn resize_for(&mut self, scene: &HybridScene) {
        self.free_m.resize(scene.free.len(), [0.0; FREE_DIM]);
        self.free_v.resize(scene.free.len(), [0.0; FREE_DIM]);
        self.sky_m.resize(scene.sky.len(), [0.0; CON_DIM]);
        self.sky_v.resize(scene.sky.len(), [0.0; CON_DIM]);
        self.plane_m.resize(scene.plane.len(), [0.0; CON_DIM]);
        self.plane_v.resize(scene.plane.len(), [0.0; CON_DIM]);
    }

    /// Keep only the flagged free-Gaussian moments (prune support).
    pub fn retain_free(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.free_m.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.free_v.retain(|_| *it.next().unwrap());
    }

    pub fn retain_sky(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.sky_m.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.sky_v.retain(|_| *it.next().unwrap());
    }

    pub fn retain_plane(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.plane_m.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.plane_v.retain(|_| *it.next().unwrap());
    }
}

/// One optimization step. Skips (with an error and a counter bump) when any
/// gradient is non-finite; otherwise updates all parameters, renormalizes
/// quaternions, re-projects sky footprints into the disc, and clamps colors.
pub fn step(scene: &mut HybridScene, grads: &GradientBuffer, state: &mut Adam) -> Result<()> {
    assert!(grads.matches(scene), "gradient buffer out of sync with scene");
    if !state.matches(scene) {
        state.resize_for(scene);
    }
    if !grads.all_finite() {
        state.skipped_nonfinite += 1;
        return Err(Error::NonFiniteGradient);
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);

    let lrs = free_lrs(scene);
    for i in 0..scene.free.len() {
        let mut p = free_params(&scene.free[i]);
        let g = free_grads(&grads.free[i]);
        let (m, v) = (&mut state.free_m[i], &mut state.free_v[i]);
        for k in 0..FREE_DIM {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            p[k] -= lrs[k] * (m[k] / bc1) / ((v[k] / bc2).sqrt() + EPS);
        }
        set_free_params(&mut scene.free[i], &p);
    }
    let lrs = con_lrs(scene);
    for i in 0..scene.sky.len() {
        let mut p = con_params_sky(&scene.sky[i]);
        let g = con_grads(&grads.sky[i]);
        let (m, v) = (&mut state.sky_m[i], &mut state.sky_v[i]);
        for k in 0..CON_DIM {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            p[k] -= lrs[k] * (m[k] / bc1) / ((v[k] / bc2).sqrt() + EPS);
        }
        set_con_params_sky(&mut scene.sky[i], &p);
    }
    for i in 0..scene.plane.len() {
        let mut p = con_params_plane(&scene.plane[i]);
        let g = con_grads(&grads.plane[i]);
        let (m, v) = (&mut state.plane_m[i], &mut state.plane_v[i]);
        for k in 0..CON_DIM {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            p[k] -= lrs[k] * (m[k] / bc1) / ((v[k] / bc2).sqrt() + EPS);
        }
        set_con_params_plane(&mut scene.plane[i], &p);
    }

    project_constraints(scene);
    scene.bump_revision();
    Ok(())
}

/// Post-step projections keeping every lift total.
fn project_constraints(scene: &mut HybridScene) {
    for g in &mut scene.free {
        let n = g.rotation.norm();
        if n > 1e-12 {
            g.rotation /= n;
        } else {
            g.rotation = crate::math::QUAT_IDENTITY;
        }
        g.color.apply(|c| *c = c.clamp(0.0, 1.0));
    }
    let r_max = 0.999 * scene.config.sky_radius;
    for g in &mut scene.sky {
        let n = g.xz.norm();
        if n > r_max {
            g.xz *= r_max / n;
        }
        g.color.apply(|c| *c = c.clamp(0.0, 1.0));
    }
    for g in &mut scene.plane {
        g.color.apply(|c| *c = c.clamp(0.0, 1.0));
    }
}

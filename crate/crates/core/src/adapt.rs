//! Adaptive Gaussian maintenance: gradient-driven clone/split densification
//! with threshold pruning, visibility-weighted importance pruning of the
//! free family, and silhouette-based depth filtering.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::img::Image;
use crate::ingest::Frame;
use crate::math::{quat_normalize, quat_to_matrix, sigmoid};
use crate::optimize::Adam;
use crate::rasterizer::{project, Family, GradientBuffer, RenderOutput};
use crate::scene::HybridScene;

/// Accumulated importance scores for the free family plus the cached
/// volume-cap state of the last accumulation.
#[derive(Clone, Debug, Default)]
pub struct ImportanceState {
    pub scores: Vec<f64>,
    pub tau: Vec<f64>,
    pub v_max50: f64,
    pub samples: u32,
}

impl ImportanceState {
    pub fn new(n: usize) -> Self {
        ImportanceState {
            scores: vec![0.0; n],
            tau: vec![0.0; n],
            v_max50: 0.0,
            samples: 0,
        }
    }

    pub fn reset(&mut self, n: usize) {
        self.scores.clear();
        self.scores.resize(n, 0.0);
        self.tau.clear();
        self.tau.resize(n, 0.0);
        self.v_max50 = 0.0;
        self.samples = 0;
    }

    pub fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.scores.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.tau.retain(|_| *it.next().unwrap());
    }

    pub fn resize(&mut self, n: usize) {
        self.scores.resize(n, 0.0);
        self.tau.resize(n, 0.0);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clone/split free Gaussians whose mean accumulated positional gradient
/// exceeds the threshold, prune by opacity and scale thresholds, and reset
/// densification statistics. Optimizer moments and importance scores follow
/// the edit (survivors keep theirs, newcomers start at zero).
///
/// Constrained families are never cloned or split; sky and road Gaussians
/// are pruned by the opacity threshold only (their scales live on fixed
/// constraint surfaces).
pub fn densify_and_prune(
    scene: &mut HybridScene,
    grads: &mut GradientBuffer,
    adam: &mut Adam,
    importance: &mut ImportanceState,
    rng: &mut impl Rng,
) -> DensifyReport {
    let cfg = scene.config.clone();
    let n = scene.free.len();
    let split_size = cfg.split_size();
    let mut keep = vec![true; n];
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    let mut report = DensifyReport::default();

    for i in 0..n {
        let g = &scene.free[i];
        let scale = g.scale();
        let max_scale = scale.max();
        let prune = sigmoid(g.opacity) < cfg.prune_opacity || max_scale > cfg.prune_scale;
        if prune {
            keep[i] = false;
            report.pruned += 1;
            continue;
        }
        let obs = grads.stats.observations[i];
        if obs == 0 {
            continue;
        }
        let mean_grad = grads.stats.grad2d_norm[i] / obs as f64;
        if mean_grad <= cfg.densify_grad_threshold {
            continue;
        }
        if max_scale < split_size {
            clones.push(i);
        } else {
            splits.push(i);
            keep[i] = false; // replaced by two smaller copies
        }
    }

    let mut appended = Vec::new();
    for &i in &clones {
        appended.push(scene.free[i].clone());
        report.cloned += 1;
    }
    for &i in &splits {
        let g = scene.free[i].clone();
        let rot = quat_to_matrix(&quat_normalize(&g.rotation));
        let scale = g.scale();
        for _ in 0..2 {
            let n0: f64 = StandardNormal.sample(rng);
            let n1: f64 = StandardNormal.sample(rng);
            let n2: f64 = StandardNormal.sample(rng);
            let offset = rot * nalgebra::Vector3::new(n0 * scale.x, n1 * scale.y, n2 * scale.z);
            let mut child = g.clone();
            child.position += offset;
            child.log_scale.apply(|s| *s -= 1.6f64.ln());
            appended.push(child);
        }
        report.split += 1;
    }

    // Apply the free-family edit everywhere.
    let mut it = keep.iter();
    scene.free.retain(|_| *it.next().unwrap());
    adam.retain_free(&keep);
    importance.retain(&keep);
    scene.free.extend(appended);
    importance.resize(scene.free.len());

    // Opacity-only pruning for the constrained families.
    let sky_keep: Vec<bool> = scene
        .sky
        .iter()
        .map(|g| sigmoid(g.opacity) >= cfg.prune_opacity)
        .collect();
    report.pruned += sky_keep.iter().filter(|k| !**k).count();
    let mut it = sky_keep.iter();
    scene.sky.retain(|_| *it.next().unwrap());
    adam.retain_sky(&sky_keep);

    let plane_keep: Vec<bool> = scene
        .plane
        .iter()
        .map(|g| sigmoid(g.opacity) >= cfg.prune_opacity)
        .collect();
    report.pruned += plane_keep.iter().filter(|k| !**k).count();
    let mut it = plane_keep.iter();
    scene.plane.retain(|_| *it.next().unwrap());
    adam.retain_plane(&plane_keep);

    adam.resize_for(scene);
    grads.resize_for(scene);
    grads.stats = crate::rasterizer::DensifyStats::new(scene.free.len());
    scene.bump_revision();
    report
}

/// Accumulate Eq-style importance: for every free Gaussian, the number of
/// pixels its screen footprint covers across the keyframe list, weighted by
/// activated opacity, by volume capped at the median, and by the
/// accumulated positional gradient normalized by the current loss.
pub fn accumulate_importance(
    state: &mut ImportanceState,
    scene: &HybridScene,
    keyframes: &[&Frame],
    grads: &GradientBuffer,
    total_loss: f64,
) {
    let n = scene.free.len();
    if state.scores.len() != n {
        state.reset(n);
    }
    if n == 0 || keyframes.is_empty() || total_loss <= 0.0 {
        return;
    }
    // Ray-overlap counts via the rasterizer's footprint test.
    let mut hits = vec![0u64; n];
    for frame in keyframes {
        for p in project(scene, frame) {
            if p.family == Family::Free {
                hits[p.source] += p.rect.pixel_count();
            }
        }
    }
    // Volume of each ellipsoid and the 50%-largest cap.
    let volumes: Vec<f64> = scene
        .free
        .iter()
        .map(|g| {
            let s = g.scale();
            4.0 / 3.0 * std::f64::consts::PI * s.x * s.y * s.z
        })
        .collect();
    let mut sorted = volumes.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let v_max50 = sorted[sorted.len() / 2];
    state.v_max50 = v_max50;
    for j in 0..n {
        let tau = volumes[j].clamp(0.0, v_max50);
        state.tau[j] = tau;
        state.scores[j] += hits[j] as f64
            * sigmoid(scene.free[j].opacity)
            * tau
            * grads.stats.grad2d_norm[j]
            / total_loss;
    }
    state.samples += 1;
}

/// Remove exactly floor(eta% · free count) free Gaussians with the lowest
/// importance scores (ties broken by lower opacity, then index). Sky and
/// road Gaussians are never touched. Resets the importance state.
pub fn importance_prune(
    scene: &mut HybridScene,
    state: &mut ImportanceState,
    eta_percent: f64,
    adam: &mut Adam,
    grads: &mut GradientBuffer,
) -> usize {
    if state.samples == 0 || scene.free.is_empty() {
        return 0;
    }
    let n = scene.free.len();
    let n_prune = ((eta_percent / 100.0) * n as f64).floor() as usize;
    if n_prune == 0 {
        state.reset(n);
        return 0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        state.scores[a]
            .partial_cmp(&state.scores[b])
            .unwrap()
            .then(
                scene.free[a]
                    .opacity
                    .partial_cmp(&scene.free[b].opacity)
                    .unwrap(),
            )
            .then(a.cmp(&b))
    });
    let mut keep = vec![true; n];
    for &i in order.iter().take(n_prune) {
        keep[i] = false;
    }
    let mut it = keep.iter();
    scene.free.retain(|_| *it.next().unwrap());
    adam.retain_free(&keep);
    grads.resize_for(scene);
    let mut stats_keep = keep.iter();
    grads.stats.grad2d_norm.retain(|_| *stats_keep.next().unwrap());
    let mut stats_keep = keep.iter();
    grads.stats.observations.retain(|_| *stats_keep.next().unwrap());
    state.reset(scene.free.len());
    scene.bump_revision();
    n_prune
}

/// Invalidate depth (set to 0) wherever the silhouette is below the filter
/// threshold; all other pixels pass through unchanged.
pub fn silhouette_filter(output: &RenderOutput, s_filter: f64) -> Image {
    let mut depth = output.depth.clone();
    for (d, s) in depth.data_mut().iter_mut().zip(output.silhouette.data()) {
        if *s < s_filter {
            *d = 0.0;
        }
    }
    depth
}

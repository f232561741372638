//! The online mapping loop and the batch entry points behind the CLI:
//! map a dataset, evaluate a checkpoint, render views, export a mesh.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{
    accumulate_importance, densify_and_prune, importance_prune, silhouette_filter,
    ImportanceState,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::img::write_pfm;
use crate::ingest::{match_features, Dataset, Frame};
use crate::init::{estimate_depths, seed_from_frame, spawn_sky};
use crate::math::pixel_center;
use crate::mesh::{extract_mesh, write_ply, PlyFormat, TriangleMesh, TsdfVolume};
use crate::metrics::{depth_mae_rmse, psnr};
use crate::optimize::{
    add_iso_gradients, evaluate_losses, ssim_index, step, update_keyframes, Adam, KeyframeList,
};
use crate::plane::{fit_plane_ransac, TrackedCloud};
use crate::rasterizer::{backward, render, unified_comparison_count, GradientBuffer};
use crate::scene::{HybridScene, PlaneSegment, SceneConfig};

/// Per-frame row of a mapping or evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStats {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae: f64,
    pub depth_rmse: f64,
    pub free_count: usize,
    pub sky_count: usize,
    pub plane_count: usize,
    pub seeded: usize,
    pub sky_spawned: usize,
    pub loss_total: f64,
    pub grouped_comparisons: u64,
    pub unified_comparisons: u64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub frames: Vec<FrameStats>,
}

impl RunReport {
    pub fn mean_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.frames.iter().map(|f| f.ssim).sum::<f64>() / self.frames.len().max(1) as f64
    }

    /// Equality over everything except wall-time columns.
    pub fn equal_ignoring_time(&self, other: &RunReport) -> bool {
        self.frames.len() == other.frames.len()
            && self.frames.iter().zip(&other.frames).all(|(a, b)| {
                let (mut x, mut y) = (a.clone(), b.clone());
                x.wall_time_s = 0.0;
                y.wall_time_s = 0.0;
                x == y
            })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from(
            "frame,psnr,ssim,depth_mae,depth_rmse,free,sky,plane,seeded,sky_spawned,loss_total,grouped_comparisons,unified_comparisons,wall_time_s\n",
        );
        for f in &self.frames {
            text.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{:.8},{},{},{:.4}\n",
                f.frame,
                f.psnr,
                f.ssim,
                f.depth_mae,
                f.depth_rmse,
                f.free_count,
                f.sky_count,
                f.plane_count,
                f.seeded,
                f.sky_spawned,
                f.loss_total,
                f.grouped_comparisons,
                f.unified_comparisons,
                f.wall_time_s
            ));
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("frames: {}\n", self.frames.len()));
        if self.frames.is_empty() {
            return out;
        }
        out.push_str(&format!("mean psnr: {:.3} dB\n", self.mean_psnr()));
        out.push_str(&format!("mean ssim: {:.4}\n", self.mean_ssim()));
        let maes: Vec<f64> = self
            .frames
            .iter()
            .map(|f| f.depth_mae)
            .filter(|v| v.is_finite())
            .collect();
        if !maes.is_empty() {
            out.push_str(&format!(
                "mean depth mae: {:.4} m\n",
                maes.iter().sum::<f64>() / maes.len() as f64
            ));
        }
        let last = self.frames.last().unwrap();
        out.push_str(&format!(
            "gaussians: {} free, {} sky, {} road\n",
            last.free_count, last.sky_count, last.plane_count
        ));
        let grouped: u64 = self.frames.iter().map(|f| f.grouped_comparisons).sum();
        let unified: u64 = self.frames.iter().map(|f| f.unified_comparisons).sum();
        if unified > 0 {
            out.push_str(&format!(
                "sort comparisons: grouped {} vs unified {} ({:.1}% saved)\n",
                grouped,
                unified,
                100.0 * (1.0 - grouped as f64 / unified as f64)
            ));
        }
        let time: f64 = self.frames.iter().map(|f| f.wall_time_s).sum();
        out.push_str(&format!("total mapping time: {time:.2} s\n"));
        out
    }
}

#[derive(Clone, Debug)]
pub struct MapOptions {
    pub config: SceneConfig,
    pub seed: u64,
    /// Where to write checkpoint + report; pure in-memory run when `None`.
    pub out_dir: Option<PathBuf>,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            config: SceneConfig::default(),
            seed: 0,
            out_dir: None,
        }
    }
}

/// Read a key-value TOML config file.
pub fn load_config(path: &Path) -> Result<SceneConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: SceneConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Write the full config (all keys, current values) as TOML.
pub fn save_config(config: &SceneConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("serialize: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Incremental plane-segment maintenance: fit the pair (prev_kf, new_kf)
/// from points first observed in that interval and append; failures fall
/// back to the latest valid plane.
fn extend_segments(
    scene: &mut HybridScene,
    cloud: &TrackedCloud,
    prev_kf: usize,
    new_kf: usize,
    rng_seed: u64,
) {
    let subset: Vec<Vector3<f64>> = cloud
        .points
        .iter()
        .zip(&cloud.first_frame)
        .filter(|(_, f)| **f >= prev_kf && **f <= new_kf)
        .map(|(p, _)| *p)
        .collect();
    let fitted = fit_plane_ransac(
        &subset,
        scene.config.plane_distance_threshold,
        scene.config.ransac_iterations,
        rng_seed,
    );
    let coefficients = match fitted {
        Ok((seg, _)) => seg.coefficients,
        Err(_) => match scene.segments.last() {
            Some(prev) => prev.coefficients,
            None => return,
        },
    };
    if let Some(last) = scene.segments.last_mut() {
        last.valid_range.1 = prev_kf.max(last.valid_range.0 + 1);
    }
    let start = if scene.segments.is_empty() { 0 } else { prev_kf };
    scene.segments.push(PlaneSegment {
        coefficients,
        valid_range: (start, usize::MAX),
    });
    scene.bump_revision();
}

/// Map a dataset frame stream into a hybrid scene. Deterministic for a
/// fixed seed and config.
pub fn run_map(dataset: &Dataset, opts: &MapOptions) -> Result<(HybridScene, RunReport)> {
    opts.config.validate()?;
    let mut scene = HybridScene::new(opts.config.clone());
    let mut adam = Adam::for_scene(&scene);
    let mut grads = GradientBuffer::for_scene(&scene);
    let mut importance = ImportanceState::new(0);
    let mut cloud = TrackedCloud::default();
    let mut report = RunReport::default();
    let mut frames: Vec<Frame> = Vec::with_capacity(dataset.n_frames);
    let mut keyframes = KeyframeList::bootstrap(0);
    let mut plane_keyframes: Vec<usize> = Vec::new();

    let mut ransac_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    ransac_rng.set_stream(1);
    let mut kf_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    kf_rng.set_stream(2);
    let mut split_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    split_rng.set_stream(3);

    let n = opts.config.keyframe_interval;
    let iters_per_frame = opts.config.iterations_per_frame;
    let mut global_iter = 0usize;
    let mut last_loss = f64::INFINITY;

    for t in 0..dataset.n_frames {
        let started = Instant::now();
        let frame = dataset.read_frame(t)?;

        // (1) Render the current state for the silhouette gate.
        let prior = if scene.total_gaussians() > 0 {
            Some(render(&scene, &frame))
        } else {
            None
        };

        // (2) Correspondences against the previous frame -> depth estimates.
        let estimates = if t > 0 {
            let prev = &frames[t - 1];
            let corrs = match_features(&frame, prev);
            estimate_depths(
                &corrs,
                &frame.pose,
                &prev.pose,
                &frame.intrinsics,
                opts.config.flow_threshold,
                opts.config.depth_approx_constant,
                0.45 * opts.config.sky_radius,
            )
        } else {
            Vec::new()
        };

        // Track the combined LiDAR + feature cloud for plane fitting.
        for s in &frame.sparse_depth {
            let world = frame.pose.cam_to_world(
                &frame
                    .intrinsics
                    .back_project(&pixel_center(s.u, s.v), s.depth),
            );
            cloud.push(world, t);
        }
        for e in &estimates {
            let world = frame
                .pose
                .cam_to_world(&frame.intrinsics.back_project(&e.pixel, e.depth));
            cloud.push(world, t);
        }

        // (3) Plane segments: initial global fit, then one per keyframe pair.
        if t == 0 {
            match fit_plane_ransac(
                &cloud.points,
                scene.config.plane_distance_threshold,
                scene.config.ransac_iterations,
                ransac_rng.gen(),
            ) {
                Ok((seg, _)) => {
                    scene.segments.push(seg);
                    scene.bump_revision();
                }
                Err(Error::DegenerateCloud) | Err(Error::VerticalPlane { .. }) => {}
                Err(e) => return Err(e),
            }
            plane_keyframes.push(0);
        } else if t % n == 0 {
            let prev_kf = *plane_keyframes.last().unwrap();
            extend_segments(&mut scene, &cloud, prev_kf, t, ransac_rng.gen());
            plane_keyframes.push(t);
        }

        // (4) Seed surface Gaussians, then sky.
        let seeded = seed_from_frame(&mut scene, &frame, &estimates, prior.as_ref());
        let sky_spawned = spawn_sky(&mut scene, &frame, prior.as_ref());
        adam.resize_for(&scene);
        grads.resize_for(&scene);
        importance.resize(scene.free.len());

        // (5) Keyframe bookkeeping.
        keyframes.set_current(t);
        if t % n == 0 {
            update_keyframes(&mut keyframes, &frame, &frames, opts.config.keyframe_count, &mut kf_rng);
        }
        frames.push(frame);

        // (6) Optimize over the keyframe list.
        for _ in 0..iters_per_frame {
            global_iter += 1;
            let kf = keyframes.sample(&mut kf_rng);
            let kf_frame = &frames[kf];
            let out = render(&scene, kf_frame);
            let eval = evaluate_losses(&scene, kf_frame, &out)?;
            backward(&scene, kf_frame, &out, &eval.d_color, &eval.d_depth, &mut grads)?;
            add_iso_gradients(
                &scene,
                scene.config.lambda_reg * scene.config.lambda_iso,
                &mut grads,
            );
            last_loss = eval.report.total;
            match step(&mut scene, &grads, &mut adam) {
                Ok(()) | Err(Error::NonFiniteGradient) => {}
                Err(e) => return Err(e),
            }
            if global_iter % 20 == 0 {
                densify_and_prune(&mut scene, &mut grads, &mut adam, &mut importance, &mut split_rng);
            }
            if global_iter % 5 == 0 && keyframes.is_full(opts.config.keyframe_count) {
                let kf_frames: Vec<&Frame> =
                    keyframes.entries().iter().map(|&i| &frames[i]).collect();
                accumulate_importance(&mut importance, &scene, &kf_frames, &grads, last_loss);
            }
        }

        // (7) Importance pruning every second frame.
        if t % 2 == 1 {
            let eta = scene.config.prune_rate;
            importance_prune(&mut scene, &mut importance, eta, &mut adam, &mut grads);
        }

        // (8) Metrics on the now-updated scene.
        let frame = &frames[t];
        let out = render(&scene, frame);
        let unified = unified_comparison_count(&out, frame);
        let (mae, rmse) = depth_mae_rmse(
            &out.depth,
            &frame.sparse_depth,
            &out.silhouette,
            scene.config.silhouette_filter,
        );
        report.frames.push(FrameStats {
            frame: t,
            psnr: psnr(&out.color, &frame.rgb),
            ssim: ssim_index(&out.color, &frame.rgb)?,
            depth_mae: mae,
            depth_rmse: rmse,
            free_count: scene.free.len(),
            sky_count: scene.sky.len(),
            plane_count: scene.plane.len(),
            seeded,
            sky_spawned,
            loss_total: last_loss,
            grouped_comparisons: out.sort_comparisons,
            unified_comparisons: unified,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&scene, &dir.join("checkpoint.bin"))?;
        report.write_csv(&dir.join("report.csv"))?;
        std::fs::write(dir.join("summary.txt"), report.summary())?;
        save_config(&scene.config, &dir.join("config.toml"))?;
    }
    Ok((scene, report))
}

/// Evaluate a checkpoint against a dataset: render every frame, score it.
pub fn run_eval(checkpoint: &Path, dataset: &Dataset) -> Result<(HybridScene, RunReport)> {
    let scene = load_checkpoint(checkpoint)?;
    let mut report = RunReport::default();
    for t in 0..dataset.n_frames {
        let started = Instant::now();
        let frame = dataset.read_frame(t)?;
        let out = render(&scene, &frame);
        let (mae, rmse) = depth_mae_rmse(
            &out.depth,
            &frame.sparse_depth,
            &out.silhouette,
            scene.config.silhouette_filter,
        );
        report.frames.push(FrameStats {
            frame: t,
            psnr: psnr(&out.color, &frame.rgb),
            ssim: ssim_index(&out.color, &frame.rgb)?,
            depth_mae: mae,
            depth_rmse: rmse,
            free_count: scene.free.len(),
            sky_count: scene.sky.len(),
            plane_count: scene.plane.len(),
            seeded: 0,
            sky_spawned: 0,
            loss_total: 0.0,
            grouped_comparisons: out.sort_comparisons,
            unified_comparisons: unified_comparison_count(&out, &frame),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok((scene, report))
}

/// Render one dataset view from a checkpoint: color PNG plus depth and
/// silhouette PFMs.
pub fn run_render(checkpoint: &Path, dataset: &Dataset, frame_index: usize, out_dir: &Path) -> Result<()> {
    let scene = load_checkpoint(checkpoint)?;
    let frame = dataset.read_frame(frame_index)?;
    let out = render(&scene, &frame);
    std::fs::create_dir_all(out_dir)?;
    out.color
        .save_png(&out_dir.join(format!("render_{frame_index:06}.png")))?;
    write_pfm(&out.depth, &out_dir.join(format!("depth_{frame_index:06}.pfm")))?;
    write_pfm(
        &out.silhouette,
        &out_dir.join(format!("silhouette_{frame_index:06}.pfm")),
    )?;
    Ok(())
}

/// Fuse silhouette-filtered depth renders of every dataset view into a TSDF
/// and export the zero level set as a PLY mesh.
pub fn run_mesh(
    checkpoint: &Path,
    dataset: &Dataset,
    out_path: &Path,
    voxel_size: f64,
) -> Result<TriangleMesh> {
    let scene = load_checkpoint(checkpoint)?;
    // First pass: bounds of the filtered depth back-projections.
    let mut lo = Vector3::from_element(f64::INFINITY);
    let mut hi = Vector3::from_element(f64::NEG_INFINITY);
    let mut filtered = Vec::with_capacity(dataset.n_frames);
    for t in 0..dataset.n_frames {
        let frame = dataset.read_frame(t)?;
        let out = render(&scene, &frame);
        let depth = silhouette_filter(&out, scene.config.silhouette_filter);
        for v in 0..frame.height() {
            for u in 0..frame.width() {
                let d = depth.at(u, v);
                if d <= 0.0 || !d.is_finite() {
                    continue;
                }
                let world = frame
                    .pose
                    .cam_to_world(&frame.intrinsics.back_project(&pixel_center(u, v), d));
                for k in 0..3 {
                    lo[k] = lo[k].min(world[k]);
                    hi[k] = hi[k].max(world[k]);
                }
            }
        }
        filtered.push((depth, frame));
    }
    if !lo.x.is_finite() {
        return Err(Error::EmptyVolume);
    }
    let pad = 2.0 * voxel_size;
    lo.apply(|v| *v -= pad);
    hi.apply(|v| *v += pad);
    let mut dims = [0usize; 3];
    for k in 0..3 {
        dims[k] = (((hi[k] - lo[k]) / voxel_size).ceil() as usize).clamp(4, 320);
    }
    let mut volume = TsdfVolume::new(lo, voxel_size, dims);
    for (depth, frame) in &filtered {
        volume.integrate(depth, &frame.pose, &frame.intrinsics);
    }
    let mesh = extract_mesh(&volume)?;
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_ply(&mesh, out_path, PlyFormat::BinaryLittleEndian)?;
    Ok(mesh)
}

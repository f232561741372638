//! Forward rasterization: tile binning, per-tile grouped ordering, and
//! front-to-back compositing of color, depth, and silhouette.

use nalgebra::Vector2;

use crate::img::{Image, ImageRgb};
use crate::ingest::Frame;
use crate::par::{map_indexed, Parallelism};
use crate::scene::HybridScene;

use super::sort::{order_grouped, order_unified};
use super::{
    project, tile_counts, RenderOutput, SplatPrimitive, TILE_SIZE, TRANSMITTANCE_CUTOFF,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SortMode {
    /// Per-family grouped ordering (free sorted, road unsorted, sky sorted).
    Grouped,
    /// Oracle: one global depth sort per tile.
    Unified,
}

/// Bin primitives to tiles by their clipped screen footprint, preserving
/// primitive-index insertion order within each tile.
fn bin_to_tiles(prims: &[SplatPrimitive], tiles_x: usize, tiles_y: usize) -> Vec<Vec<u32>> {
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, p) in prims.iter().enumerate() {
        let tx0 = (p.rect.x0 as usize) / TILE_SIZE;
        let tx1 = (p.rect.x1 as usize) / TILE_SIZE;
        let ty0 = (p.rect.y0 as usize) / TILE_SIZE;
        let ty1 = (p.rect.y1 as usize) / TILE_SIZE;
        for ty in ty0..=ty1.min(tiles_y - 1) {
            for tx in tx0..=tx1.min(tiles_x - 1) {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    lists
}

/// Composite one pixel over an ordered primitive list.
/// Returns (color, depth, silhouette, final transmittance).
pub fn composite_pixel(
    prims: &[SplatPrimitive],
    order: &[u32],
    pixel: Vector2<f64>,
) -> ([f64; 3], f64, f64, f64) {
    let (u, v) = (pixel.x.floor() as i64, pixel.y.floor() as i64);
    let mut color = [0.0f64; 3];
    let mut depth = 0.0f64;
    let mut silhouette = 0.0f64;
    let mut transmittance = 1.0f64;
    for &idx in order {
        let p = &prims[idx as usize];
        if !p.rect.contains(u, v) {
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
        let w = f * transmittance;
        color[0] += p.color.x * w;
        color[1] += p.color.y * w;
        color[2] += p.color.z * w;
        depth += p.depth * w;
        silhouette += w;
        transmittance *= 1.0 - f;
        if transmittance < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    (color, depth, silhouette, transmittance)
}

struct TileResult {
    order: Vec<u32>,
    comparisons: u64,
    // Row-major within the tile.
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    silhouette: Vec<f64>,
    transmittance: Vec<f64>,
}

/// Render with explicit sort mode and parallelism. Deterministic for a fixed
/// (scene, frame) regardless of the parallelism mode: tiles are independent
/// and assembled in tile order.
pub fn render_with(
    scene: &HybridScene,
    frame: &Frame,
    mode: SortMode,
    par: Parallelism,
) -> RenderOutput {
    let (w, h) = (frame.width(), frame.height());
    let (tiles_x, tiles_y) = tile_counts(w, h);
    let prims = project(scene, frame);
    let bins = bin_to_tiles(&prims, tiles_x, tiles_y);
    let sort_inliers = scene.config.sort_inliers;

    let tile_results: Vec<TileResult> = map_indexed(par, tiles_x * tiles_y, |t| {
        let ordering = match mode {
            SortMode::Grouped => order_grouped(&prims, &bins[t], sort_inliers),
            SortMode::Unified => order_unified(&prims, &bins[t]),
        };
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let tw = TILE_SIZE.min(w - x0);
        let th = TILE_SIZE.min(h - y0);
        let mut color = vec![[0.0; 3]; tw * th];
        let mut depth = vec![0.0; tw * th];
        let mut silhouette = vec![0.0; tw * th];
        let mut transmittance = vec![1.0; tw * th];
        for dy in 0..th {
            for dx in 0..tw {
                let pixel = Vector2::new((x0 + dx) as f64 + 0.5, (y0 + dy) as f64 + 0.5);
                let (c, d, s, tr) = composite_pixel(&prims, &ordering.order, pixel);
                let k = dy * tw + dx;
                color[k] = c;
                depth[k] = d;
                silhouette[k] = s;
                transmittance[k] = tr;
            }
        }
        TileResult {
            order: ordering.order,
            comparisons: ordering.comparisons,
            color,
            depth,
            silhouette,
            transmittance,
        }
    });

    let mut color = ImageRgb::zeros(w, h);
    let mut depth = Image::zeros(w, h);
    let mut silhouette = Image::zeros(w, h);
    let mut transmittance = Image::filled(w, h, 1.0);
    let mut tile_order = Vec::with_capacity(tile_results.len());
    let mut comparisons = 0u64;
    for (t, res) in tile_results.into_iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let tw = TILE_SIZE.min(w - x0);
        let th = TILE_SIZE.min(h - y0);
        for dy in 0..th {
            for dx in 0..tw {
                let k = dy * tw + dx;
                let (u, v) = (x0 + dx, y0 + dy);
                color.set(u, v, res.color[k]);
                *depth.at_mut(u, v) = res.depth[k];
                *silhouette.at_mut(u, v) = res.silhouette[k];
                *transmittance.at_mut(u, v) = res.transmittance[k];
            }
        }
        comparisons += res.comparisons;
        tile_order.push(res.order);
    }

    RenderOutput {
        color,
        depth,
        silhouette,
        transmittance,
        primitives: prims,
        tile_order,
        tiles_x,
        tiles_y,
        sort_comparisons: comparisons,
        scene_revision: scene.revision(),
    }
}

/// Default render: grouped sort, parallel when the feature is enabled.
pub fn render(scene: &HybridScene, frame: &Frame) -> RenderOutput {
    render_with(scene, frame, SortMode::Grouped, Parallelism::default())
}

/// Comparison count a unified global sort would spend on this frame's
/// primitive stream (ordering only, no compositing).
pub fn unified_comparison_count(output: &RenderOutput, frame: &Frame) -> u64 {
    let (tiles_x, tiles_y) = tile_counts(frame.width(), frame.height());
    let bins = bin_to_tiles(&output.primitives, tiles_x, tiles_y);
    bins.iter()
        .map(|members| order_unified(&output.primitives, members).comparisons)
        .sum()
}

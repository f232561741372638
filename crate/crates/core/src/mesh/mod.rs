//! TSDF fusion of silhouette-filtered depth maps and marching-cubes mesh
//! extraction with PLY export.

mod mc_tables;
mod ply;

pub use ply::{read_ply_ascii_vertices, write_ply, PlyFormat};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::math::{Intrinsics, Pose};
use crate::par::{map_indexed, Parallelism};

use mc_tables::{MC_EDGE_TABLE, MC_TRIANGLE_TABLE};

/// Truncation band in voxels.
const TRUNCATION_VOXELS: f64 = 4.0;
/// Running-average weight cap.
const WEIGHT_CAP: f32 = 64.0;

/// Truncated signed distance volume with per-voxel integration weights.
#[derive(Clone, Debug)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    tsdf: Vec<f32>,
    weights: Vec<f32>,
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        TsdfVolume {
            origin,
            voxel_size,
            dims,
            tsdf: vec![1.0; n],
            weights: vec![0.0; n],
        }
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn tsdf_at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.tsdf[self.index(x, y, z)]
    }

    pub fn weight_at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.weights[self.index(x, y, z)]
    }

    pub fn truncation(&self) -> f64 {
        TRUNCATION_VOXELS * self.voxel_size
    }

    /// World position of a voxel center.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                (x as f64 + 0.5) * self.voxel_size,
                (y as f64 + 0.5) * self.voxel_size,
                (z as f64 + 0.5) * self.voxel_size,
            )
    }

    /// Projective TSDF update from one (silhouette-filtered) depth image.
    /// Invalid pixels (depth <= 0 or non-finite) are skipped; each observed
    /// voxel gets a unit-weight running-average update capped at 64.
    pub fn integrate(&mut self, depth: &Image, pose: &Pose, intr: &Intrinsics) {
        self.integrate_with(depth, pose, intr, Parallelism::default());
    }

    pub fn integrate_with(
        &mut self,
        depth: &Image,
        pose: &Pose,
        intr: &Intrinsics,
        par: Parallelism,
    ) {
        let truncation = self.truncation();
        let (w, h) = (depth.width(), depth.height());
        let [dx, dy, dz] = self.dims;
        let slab = dy * dx;
        // One z-slab per task: disjoint voxel ranges, deterministic writes.
        let updates: Vec<Vec<(usize, f32)>> = map_indexed(par, dz, |z| {
            let mut local = Vec::new();
            for y in 0..dy {
                for x in 0..dx {
                    let world = self.voxel_center(x, y, z);
                    let cam = pose.world_to_cam(&world);
                    if cam.z <= 0.0 {
                        continue;
                    }
                    let px = intr.project(&cam);
                    let (u, v) = (px.x.floor(), px.y.floor());
                    if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                        continue;
                    }
                    let measured = depth.at(u as usize, v as usize);
                    if !(measured > 0.0) || !measured.is_finite() {
                        continue;
                    }
                    let sdf = measured - cam.z;
                    if sdf < -truncation {
                        continue;
                    }
                    let value = (sdf / truncation).clamp(-1.0, 1.0) as f32;
                    local.push((z * slab + y * dx + x, value));
                }
            }
            local
        });
        for slab_updates in updates {
            for (idx, value) in slab_updates {
                let w_old = self.weights[idx];
                let w_new = (w_old + 1.0).min(WEIGHT_CAP);
                self.tsdf[idx] = (self.tsdf[idx] * w_old + value) / (w_old + 1.0);
                self.weights[idx] = w_new;
            }
        }
    }
}

/// Indexed triangle mesh.
#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    /// V - E + F over unique undirected edges (2 for a closed sphere-like
    /// surface).
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.faces.len() as i64
    }
}

// Cube corner offsets in the canonical marching-cubes order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

// The two corners each of the 12 cube edges connects.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Extract the zero level set by marching cubes over observed voxels.
/// Vertices are interpolated along edges and welded through a global
/// (corner, corner) edge key, so shared edges produce shared vertices.
pub fn extract_mesh(volume: &TsdfVolume) -> Result<TriangleMesh> {
    let [dx, dy, dz] = volume.dims;
    let corner_id = |x: usize, y: usize, z: usize| -> u64 {
        ((z * (dy + 1) + y) * (dx + 1) + x) as u64
    };
    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: std::collections::HashMap<(u64, u64), u32> =
        std::collections::HashMap::new();

    for z in 0..dz.saturating_sub(1) {
        for y in 0..dy.saturating_sub(1) {
            for x in 0..dx.saturating_sub(1) {
                let mut values = [0.0f32; 8];
                let mut observed = true;
                let mut case = 0usize;
                for (k, off) in CORNERS.iter().enumerate() {
                    let (cx, cy, cz) = (x + off[0], y + off[1], z + off[2]);
                    if volume.weight_at(cx, cy, cz) <= 0.0 {
                        observed = false;
                        break;
                    }
                    values[k] = volume.tsdf_at(cx, cy, cz);
                    if values[k] < 0.0 {
                        case |= 1 << k;
                    }
                }
                if !observed || MC_EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut edge_verts = [u32::MAX; 12];
                for (e, pair) in EDGES.iter().enumerate() {
                    if MC_EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let a = CORNERS[pair[0]];
                    let b = CORNERS[pair[1]];
                    let ka = corner_id(x + a[0], y + a[1], z + a[2]);
                    let kb = corner_id(x + b[0], y + b[1], z + b[2]);
                    let key = (ka.min(kb), ka.max(kb));
                    let idx = *edge_vertex.entry(key).or_insert_with(|| {
                        let va = values[pair[0]] as f64;
                        let vb = values[pair[1]] as f64;
                        let t = if (va - vb).abs() < 1e-12 {
                            0.5
                        } else {
                            (va / (va - vb)).clamp(0.0, 1.0)
                        };
                        let pa = volume.voxel_center(x + a[0], y + a[1], z + a[2]);
                        let pb = volume.voxel_center(x + b[0], y + b[1], z + b[2]);
                        let p = pa + (pb - pa) * t;
                        mesh.vertices.push(p);
                        (mesh.vertices.len() - 1) as u32
                    });
                    edge_verts[e] = idx;
                }
                let tris = &MC_TRIANGLE_TABLE[case];
                let mut k = 0;
                while k < 16 && tris[k] >= 0 {
                    mesh.faces.push([
                        edge_verts[tris[k] as usize],
                        edge_verts[tris[k + 1] as usize],
                        edge_verts[tris[k + 2] as usize],
                    ]);
                    k += 3;
                }
            }
        }
    }
    if mesh.faces.is_empty() {
        return Err(Error::EmptyVolume);
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::Image;
    use nalgebra::Matrix3;

    fn lookat_pose(eye: Vector3<f64>, target: Vector3<f64>) -> Pose {
        // Camera +z toward target, +y chosen world-down-ish.
        let fwd = (target - eye).normalize();
        let up_hint = if fwd.y.abs() > 0.9 {
            Vector3::x()
        } else {
            Vector3::new(0.0, -1.0, 0.0)
        };
        let right = up_hint.cross(&fwd).normalize();
        let down = fwd.cross(&right).normalize();
        let r = Matrix3::from_columns(&[right, down, fwd]);
        Pose::new(r, eye)
    }

    fn render_analytic_depth(
        f: impl Fn(&Vector3<f64>, &Vector3<f64>) -> f64,
        pose: &Pose,
        intr: &Intrinsics,
        w: usize,
        h: usize,
    ) -> Image {
        let mut img = Image::zeros(w, h);
        for v in 0..h {
            for u in 0..w {
                let dir = pose.dir_to_world(&intr.ray_dir(&crate::math::pixel_center(u, v)));
                *img.at_mut(u, v) = f(&pose.camera_center(), &dir);
            }
        }
        img
    }

    fn plane_depth(origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        // Ground plane y = 0; dir z-component is the depth parameter.
        if dir.y >= -1e-9 {
            return 0.0;
        }
        -origin.y / dir.y
    }

    fn sphere_depth(origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        // Unit sphere at the origin.
        let a = dir.dot(dir);
        let b = 2.0 * origin.dot(dir);
        let c = origin.dot(origin) - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return 0.0;
        }
        let t = (-b - disc.sqrt()) / (2.0 * a);
        if t > 0.0 {
            t
        } else {
            0.0
        }
    }

    fn intr64() -> Intrinsics {
        Intrinsics {
            fx: 64.0,
            fy: 64.0,
            cx: 32.0,
            cy: 32.0,
        }
    }

    #[test]
    fn plane_zero_crossing_within_one_voxel() {
        let voxel = 0.05;
        let mut vol = TsdfVolume::new(Vector3::new(-1.0, -0.4, 0.5), voxel, [40, 16, 40]);
        let pose = lookat_pose(Vector3::new(0.0, 1.2, 0.0), Vector3::new(0.0, 0.0, 1.5));
        let depth = render_analytic_depth(plane_depth, &pose, &intr64(), 64, 64);
        vol.integrate(&depth, &pose, &intr64());
        let mesh = extract_mesh(&vol).unwrap();
        assert!(!mesh.vertices.is_empty());
        for v in &mesh.vertices {
            assert!(v.y.abs() <= voxel, "vertex {v:?} off the plane");
        }
    }

    #[test]
    fn empty_depth_leaves_volume_unchanged() {
        let mut vol = TsdfVolume::new(Vector3::zeros(), 0.1, [8, 8, 8]);
        let before = vol.tsdf.clone();
        let depth = Image::zeros(32, 32);
        let pose = Pose::identity();
        vol.integrate(&depth, &pose, &intr64());
        assert_eq!(vol.tsdf, before);
        assert!(vol.weights.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn consistent_views_double_the_weights() {
        let voxel = 0.05;
        let mut vol = TsdfVolume::new(Vector3::new(-1.0, -0.4, 0.5), voxel, [40, 16, 40]);
        let pose = lookat_pose(Vector3::new(0.0, 1.2, 0.0), Vector3::new(0.0, 0.0, 1.5));
        let depth = render_analytic_depth(plane_depth, &pose, &intr64(), 64, 64);
        vol.integrate(&depth, &pose, &intr64());
        let w1: Vec<f32> = vol.weights.clone();
        vol.integrate(&depth, &pose, &intr64());
        for (a, b) in w1.iter().zip(&vol.weights) {
            assert_eq!(*b, a * 2.0);
        }
    }

    #[test]
    fn unobserved_volume_is_empty() {
        let vol = TsdfVolume::new(Vector3::zeros(), 0.1, [8, 8, 8]);
        assert!(matches!(extract_mesh(&vol), Err(Error::EmptyVolume)));
    }

    fn fuse_sphere(voxel: f64) -> TsdfVolume {
        let mut vol = TsdfVolume::new(Vector3::new(-1.5, -1.5, -1.5), voxel, [
            (3.0 / voxel) as usize,
            (3.0 / voxel) as usize,
            (3.0 / voxel) as usize,
        ]);
        let intr = intr64();
        // Equatorial orbit, two mid-latitude rings, and both poles: without
        // the mid rings the 45 degree band is only seen at grazing angles
        // and stays unobserved.
        let mut eyes: Vec<Vector3<f64>> = Vec::new();
        for (ring_y, radius, count) in [(0.0, 3.0, 12), (2.0, 2.3, 8), (-2.0, 2.3, 8)] {
            for k in 0..count {
                let a = k as f64 / count as f64 * std::f64::consts::TAU;
                eyes.push(Vector3::new(radius * a.cos(), ring_y, radius * a.sin()));
            }
        }
        eyes.push(Vector3::new(0.05, 3.0, 0.0));
        eyes.push(Vector3::new(0.05, -3.0, 0.0));
        for eye in eyes {
            let pose = lookat_pose(eye, Vector3::zeros());
            let depth = render_analytic_depth(sphere_depth, &pose, &intr, 64, 64);
            vol.integrate(&depth, &pose, &intr);
        }
        vol
    }

    #[test]
    fn fused_sphere_has_unit_radius_and_is_watertight() {
        let voxel = 0.08;
        let vol = fuse_sphere(voxel);
        let mesh = extract_mesh(&vol).unwrap();
        assert!(mesh.faces.len() > 100);
        let mean_r: f64 =
            mesh.vertices.iter().map(|v| v.norm()).sum::<f64>() / mesh.vertices.len() as f64;
        assert!(
            (mean_r - 1.0).abs() <= voxel,
            "mean radius {mean_r} vs voxel {voxel}"
        );
        assert_eq!(mesh.euler_characteristic(), 2);
    }

    #[test]
    fn integration_order_independent() {
        let voxel = 0.06;
        let make = |order: &[usize]| {
            let mut vol =
                TsdfVolume::new(Vector3::new(-1.0, -0.4, 0.5), voxel, [32, 12, 32]);
            let intr = intr64();
            let eyes = [
                Vector3::new(0.0, 1.2, 0.0),
                Vector3::new(0.3, 1.0, -0.2),
                Vector3::new(-0.2, 1.4, 0.1),
            ];
            for &k in order {
                let pose = lookat_pose(eyes[k], Vector3::new(0.0, 0.0, 1.5));
                let depth = render_analytic_depth(plane_depth, &pose, &intr, 48, 48);
                vol.integrate(&depth, &pose, &intr);
            }
            vol
        };
        let a = make(&[0, 1, 2]);
        let b = make(&[2, 0, 1]);
        for (x, y) in a.tsdf.iter().zip(&b.tsdf) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn fused_flat_ground_vertices_on_plane() {
        let voxel = 0.05;
        let mut vol = TsdfVolume::new(Vector3::new(-1.2, -0.3, 0.4), voxel, [48, 12, 48]);
        let intr = intr64();
        for k in 0..4 {
            let eye = Vector3::new(0.1 * k as f64, 1.1 + 0.1 * k as f64, -0.2 * k as f64);
            let pose = lookat_pose(eye, Vector3::new(0.0, 0.0, 1.4));
            let depth = render_analytic_depth(plane_depth, &pose, &intr, 64, 64);
            vol.integrate(&depth, &pose, &intr);
        }
        let mesh = extract_mesh(&vol).unwrap();
        let within = mesh
            .vertices
            .iter()
            .filter(|v| v.y.abs() <= 2.0 * voxel)
            .count();
        let frac = within as f64 / mesh.vertices.len() as f64;
        assert!(frac >= 0.99, "only {frac:.3} of vertices near the plane");
    }
}

//! RANSAC road-plane segmentation over combined LiDAR + feature point
//! clouds, and per-keyframe-pair plane segments for undulating roads.

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par::{map_indexed, Parallelism};
use crate::scene::PlaneSegment;

/// World-frame points, each tagged with the frame that first observed it.
/// Feeds the per-keyframe-pair segment fits.
#[derive(Clone, Debug, Default)]
pub struct TrackedCloud {
    pub points: Vec<Vector3<f64>>,
    pub first_frame: Vec<usize>,
}

impl TrackedCloud {
    pub fn push(&mut self, p: Vector3<f64>, frame: usize) {
        self.points.push(p);
        self.first_frame.push(frame);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn plane_from_three(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Option<Vector4<f64>> {
    let n = (b - a).cross(&(c - a));
    let norm = n.norm();
    if norm < 1e-12 {
        return None;
    }
    let n = n / norm;
    Some(Vector4::new(n.x, n.y, n.z, -n.dot(a)))
}

/// Flip so the normal points into the +y hemisphere.
fn canonicalize(coeffs: Vector4<f64>) -> Vector4<f64> {
    if coeffs.y < 0.0 {
        -coeffs
    } else {
        coeffs
    }
}

fn distances(points: &[Vector3<f64>], coeffs: &Vector4<f64>) -> Vec<f64> {
    let n = coeffs.xyz();
    points.iter().map(|p| (n.dot(p) + coeffs.w).abs()).collect()
}

/// Least-squares plane through a point subset (PCA on the centroid-free
/// covariance; smallest eigenvector is the normal).
fn refit(points: &[Vector3<f64>], mask: &[bool]) -> Option<Vector4<f64>> {
    let mut centroid = Vector3::zeros();
    let mut count = 0usize;
    for (p, m) in points.iter().zip(mask) {
        if *m {
            centroid += p;
            count += 1;
        }
    }
    if count < 3 {
        return None;
    }
    centroid /= count as f64;
    let mut cov = nalgebra::Matrix3::<f64>::zeros();
    for (p, m) in points.iter().zip(mask) {
        if *m {
            let d = p - centroid;
            cov += d * d.transpose();
        }
    }
    let eig = cov.symmetric_eigen();
    let mut min_k = 0;
    for k in 1..3 {
        if eig.eigenvalues[k] < eig.eigenvalues[min_k] {
            min_k = k;
        }
    }
    let n = eig.eigenvectors.column(min_k).into_owned();
    let norm = n.norm();
    if norm < 1e-12 {
        return None;
    }
    let n = n / norm;
    Some(Vector4::new(n.x, n.y, n.z, -n.dot(&centroid)))
}

fn is_collinear(points: &[Vector3<f64>]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let mut centroid = Vector3::zeros();
    for p in points {
        centroid += p;
    }
    centroid /= points.len() as f64;
    let mut cov = nalgebra::Matrix3::<f64>::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Two vanishing eigenvalues: all mass on one line.
    let scale = eig[2].max(1e-12);
    eig[1] / scale < 1e-10
}

/// Fit the dominant plane by RANSAC: `iterations` minimal 3-point
/// hypotheses scored by strict-inequality inlier count (ties broken by
/// lower RMS inlier distance, then lower hypothesis index), followed by a
/// least-squares refit on the winning inliers.
///
/// Deterministic for a fixed `rng_seed`; hypothesis scoring parallelizes
/// over iterations with an order-independent reduction.
pub fn fit_plane_ransac(
    points: &[Vector3<f64>],
    d_th: f64,
    iterations: usize,
    rng_seed: u64,
) -> Result<(PlaneSegment, Vec<bool>)> {
    if points.len() < 3 || is_collinear(points) {
        return Err(Error::DegenerateCloud);
    }
    // Pre-draw all sample triples so scoring order cannot affect the result.
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let triples: Vec<[usize; 3]> = (0..iterations)
        .map(|_| {
            let i = rng.gen_range(0..points.len());
            let mut j = rng.gen_range(0..points.len());
            while j == i {
                j = rng.gen_range(0..points.len());
            }
            let mut k = rng.gen_range(0..points.len());
            while k == i || k == j {
                k = rng.gen_range(0..points.len());
            }
            [i, j, k]
        })
        .collect();

    // Score = (inlier count, -rms); total order with the index tiebreak.
    let scores = map_indexed(Parallelism::default(), triples.len(), |idx| {
        let [i, j, k] = triples[idx];
        let Some(coeffs) = plane_from_three(&points[i], &points[j], &points[k]) else {
            return (0usize, f64::INFINITY);
        };
        let mut count = 0usize;
        let mut sq_sum = 0.0;
        for d in distances(points, &coeffs) {
            if d < d_th {
                count += 1;
                sq_sum += d * d;
            }
        }
        let rms = if count > 0 {
            (sq_sum / count as f64).sqrt()
        } else {
            f64::INFINITY
        };
        (count, rms)
    });

    let mut best: Option<(usize, usize, f64)> = None; // (idx, count, rms)
    for (idx, (count, rms)) in scores.iter().enumerate() {
        let better = match &best {
            None => *count > 0,
            Some((_, bc, brms)) => count > bc || (count == bc && *rms < *brms),
        };
        if better {
            best = Some((idx, *count, *rms));
        }
    }
    let Some((best_idx, _, _)) = best else {
        return Err(Error::DegenerateCloud);
    };
    let [i, j, k] = triples[best_idx];
    let hypo = plane_from_three(&points[i], &points[j], &points[k]).unwrap();
    let hypo_mask: Vec<bool> = distances(points, &hypo).iter().map(|d| *d < d_th).collect();
    let coeffs = canonicalize(refit(points, &hypo_mask).unwrap_or(hypo));
    if coeffs.y.abs() < 0.1 {
        return Err(Error::VerticalPlane { b: coeffs.y.abs() });
    }
    let mask: Vec<bool> = distances(points, &coeffs).iter().map(|d| *d < d_th).collect();
    Ok((
        PlaneSegment {
            coefficients: coeffs,
            valid_range: (0, usize::MAX),
        },
        mask,
    ))
}

/// Partition points into (inliers, outliers) of a segment by strict
/// distance-below-threshold.
pub fn classify(
    points: &[Vector3<f64>],
    segment: &PlaneSegment,
    d_th: f64,
) -> (Vec<usize>, Vec<usize>) {
    let mut inliers = Vec::new();
    let mut outliers = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if segment.signed_distance(p).abs() < d_th {
            inliers.push(i);
        } else {
            outliers.push(i);
        }
    }
    (inliers, outliers)
}

/// Rebuild the per-keyframe-pair segments: one fit per adjacent keyframe
/// pair, from the points first observed in that pair's frame interval.
/// A failed fit falls back to the latest valid segment's plane. A single
/// keyframe yields one open-ended global segment.
pub fn update_segments(
    cloud: &TrackedCloud,
    keyframes: &[usize],
    d_th: f64,
    iterations: usize,
    rng_seed: u64,
) -> Result<Vec<PlaneSegment>> {
    assert!(!keyframes.is_empty(), "need at least one keyframe");
    let mut sorted = keyframes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let fit_range = |lo: usize, hi: usize, seed: u64| -> Result<PlaneSegment> {
        let subset: Vec<Vector3<f64>> = cloud
            .points
            .iter()
            .zip(&cloud.first_frame)
            .filter(|(_, f)| **f >= lo && **f <= hi)
            .map(|(p, _)| *p)
            .collect();
        let (seg, _) = fit_plane_ransac(&subset, d_th, iterations, seed)?;
        Ok(seg)
    };

    if sorted.len() == 1 {
        let mut seg = fit_range(0, usize::MAX, rng_seed)?;
        seg.valid_range = (0, usize::MAX);
        return Ok(vec![seg]);
    }

    let mut segments: Vec<PlaneSegment> = Vec::with_capacity(sorted.len() - 1);
    for w in 0..sorted.len() - 1 {
        let (lo, hi) = (sorted[w], sorted[w + 1]);
        let valid_end = if w + 2 == sorted.len() { usize::MAX } else { hi };
        match fit_range(lo, hi, rng_seed.wrapping_add(w as u64)) {
            Ok(mut seg) => {
                seg.valid_range = (lo, valid_end);
                segments.push(seg);
            }
            Err(e) => {
                // Fall back to the previous valid plane over this interval.
                if let Some(prev) = segments.last() {
                    segments.push(PlaneSegment {
                        coefficients: prev.coefficients,
                        valid_range: (lo, valid_end),
                    });
                } else {
                    return Err(e);
                }
            }
        }
    }
    // First segment also covers any frames before its keyframe.
    if let Some(first) = segments.first_mut() {
        first.valid_range.0 = 0;
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn plane_cloud(
        normal: Vector3<f64>,
        offset: f64,
        n: usize,
        noise: f64,
        outlier_frac: f64,
        seed: u64,
    ) -> Vec<Vector3<f64>> {
        let normal = normal.normalize();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Tangent basis.
        let t1 = if normal.x.abs() < 0.9 {
            Vector3::x().cross(&normal).normalize()
        } else {
            Vector3::y().cross(&normal).normalize()
        };
        let t2 = normal.cross(&t1);
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.gen_bool(outlier_frac) {
                pts.push(Vector3::new(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                ));
            } else {
                let a = rng.gen_range(-10.0..10.0);
                let b = rng.gen_range(-10.0..10.0);
                let h = rng.gen_range(-noise..noise.max(1e-12));
                pts.push(t1 * a + t2 * b + normal * (offset + h));
            }
        }
        pts
    }

    #[test]
    fn recovers_ground_plane_among_outliers() {
        let pts = plane_cloud(Vector3::y(), 0.0, 400, 0.0, 0.2, 1);
        let (seg, mask) = fit_plane_ransac(&pts, 0.15, 200, 7).unwrap();
        let angle = seg.normal().dot(&Vector3::y()).acos().to_degrees();
        assert!(angle < 1.0, "normal off by {angle} deg");
        // Every exact plane point must be flagged inlier.
        for (p, m) in pts.iter().zip(&mask) {
            if p.y.abs() < 1e-9 {
                assert!(m);
            }
        }
    }

    #[test]
    fn exact_fit_through_three_points() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let (seg, mask) = fit_plane_ransac(&pts, 0.1, 10, 0).unwrap();
        assert!((seg.coefficients - Vector4::new(0.0, 1.0, 0.0, 0.0)).norm() < 1e-9);
        assert_eq!(mask, vec![true, true, true]);
    }

    #[test]
    fn collinear_points_rejected() {
        let pts: Vec<Vector3<f64>> = (0..50)
            .map(|i| Vector3::new(i as f64 * 0.3, 1.0 - i as f64 * 0.2, 2.0 * i as f64))
            .collect();
        assert!(matches!(
            fit_plane_ransac(&pts, 0.1, 50, 3),
            Err(Error::DegenerateCloud)
        ));
    }

    #[test]
    fn vertical_plane_rejected() {
        let pts = plane_cloud(Vector3::x(), 2.0, 200, 0.01, 0.0, 4);
        assert!(matches!(
            fit_plane_ransac(&pts, 0.15, 100, 5),
            Err(Error::VerticalPlane { .. })
        ));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let pts = plane_cloud(Vector3::new(0.05, 1.0, -0.08), 1.3, 300, 0.02, 0.25, 9);
        let (a, ma) = fit_plane_ransac(&pts, 0.15, 200, 42).unwrap();
        let (b, mb) = fit_plane_ransac(&pts, 0.15, 200, 42).unwrap();
        assert_eq!(a.coefficients, b.coefficients);
        assert_eq!(ma, mb);
    }

    #[test]
    fn refit_rms_within_threshold() {
        let pts = plane_cloud(Vector3::new(0.1, 1.0, 0.2), -0.5, 500, 0.05, 0.2, 17);
        let (seg, mask) = fit_plane_ransac(&pts, 0.15, 200, 11).unwrap();
        let mut sq = 0.0;
        let mut n = 0;
        for (p, m) in pts.iter().zip(&mask) {
            if *m {
                sq += seg.signed_distance(p).powi(2);
                n += 1;
            }
        }
        assert!(n > 0);
        assert!((sq / n as f64).sqrt() <= 0.15);
    }

    #[test]
    fn classify_boundary_is_strict() {
        let seg = PlaneSegment {
            coefficients: Vector4::new(0.0, 1.0, 0.0, 0.0),
            valid_range: (0, usize::MAX),
        };
        let pts = vec![
            Vector3::new(1.0, 0.0, 2.0),   // on plane
            Vector3::new(0.0, 0.15, 0.0),  // exactly at threshold
            Vector3::new(0.0, 0.1499, 0.0),
        ];
        let (inl, out) = classify(&pts, &seg, 0.15);
        assert_eq!(inl, vec![0, 2]);
        assert_eq!(out, vec![1]);
    }

    proptest! {
        #[test]
        fn classify_partitions_exhaustively(pts in proptest::collection::vec(
            (-20.0f64..20.0, -2.0f64..2.0, -20.0f64..20.0), 1..120))
        {
            let pts: Vec<Vector3<f64>> = pts.into_iter().map(|(x,y,z)| Vector3::new(x,y,z)).collect();
            let seg = PlaneSegment {
                coefficients: Vector4::new(0.0, 1.0, 0.0, -0.3),
                valid_range: (0, usize::MAX),
            };
            let (inl, out) = classify(&pts, &seg, 0.5);
            prop_assert_eq!(inl.len() + out.len(), pts.len());
            let mut all: Vec<usize> = inl.iter().chain(out.iter()).copied().collect();
            all.sort_unstable();
            let expect: Vec<usize> = (0..pts.len()).collect();
            prop_assert_eq!(all, expect);
            for i in inl {
                prop_assert!(seg.signed_distance(&pts[i]).abs() < 0.5);
            }
            for o in out {
                prop_assert!(seg.signed_distance(&pts[o]).abs() >= 0.5);
            }
        }
    }

    #[test]
    fn classify_agrees_with_direct_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pts: Vec<Vector3<f64>> = (0..300)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect();
        let n = Vector3::new(0.2, 1.0, -0.1).normalize();
        let seg = PlaneSegment {
            coefficients: Vector4::new(n.x, n.y, n.z, 0.12),
            valid_range: (0, usize::MAX),
        };
        let (inl, _) = classify(&pts, &seg, 0.3);
        for (i, p) in pts.iter().enumerate() {
            let d = (n.dot(p) + 0.12).abs();
            assert_eq!(inl.contains(&i), d < 0.3);
        }
    }

    fn flat_cloud_over_frames(frames: usize, per_frame: usize, seed: u64) -> TrackedCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = TrackedCloud::default();
        for f in 0..frames {
            for _ in 0..per_frame {
                cloud.push(
                    Vector3::new(
                        rng.gen_range(-8.0..8.0),
                        rng.gen_range(-0.01..0.01),
                        f as f64 * 4.0 + rng.gen_range(0.0..4.0),
                    ),
                    f,
                );
            }
        }
        cloud
    }

    #[test]
    fn flat_scene_segments_agree() {
        let cloud = flat_cloud_over_frames(11, 60, 31);
        let segs = update_segments(&cloud, &[0, 5, 10], 0.15, 200, 3).unwrap();
        assert_eq!(segs.len(), 2);
        let angle = segs[0]
            .normal()
            .dot(&segs[1].normal())
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees();
        assert!(angle < 1.0, "segment normals differ by {angle} deg");
        assert_eq!(segs[0].valid_range, (0, 5));
        assert_eq!(segs[1].valid_range, (5, usize::MAX));
    }

    #[test]
    fn single_keyframe_gives_global_segment() {
        let cloud = flat_cloud_over_frames(3, 50, 8);
        let segs = update_segments(&cloud, &[0], 0.15, 100, 2).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].valid_range, (0, usize::MAX));
    }

    #[test]
    fn ramp_scene_recovers_the_grade_change() {
        // Flat road for frames 0..5, then a 5 degree upslope.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut cloud = TrackedCloud::default();
        let grade = 5.0f64.to_radians().tan();
        for f in 0..11usize {
            for _ in 0..80 {
                let x = rng.gen_range(-8.0..8.0);
                let z = f as f64 * 4.0 + rng.gen_range(0.0..4.0);
                let y = if z <= 20.0 { 0.0 } else { (z - 20.0) * grade };
                cloud.push(Vector3::new(x, y + rng.gen_range(-0.005..0.005), z), f);
            }
        }
        let segs = update_segments(&cloud, &[0, 5, 10], 0.15, 300, 5).unwrap();
        assert_eq!(segs.len(), 2);
        let angle = segs[0]
            .normal()
            .dot(&segs[1].normal())
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees();
        assert!((angle - 5.0).abs() < 1.0, "expected ~5 deg, got {angle}");
    }
}

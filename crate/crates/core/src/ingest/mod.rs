//! Frame streams on disk, synthetic street scenes with ground truth, and
//! pixel correspondences between adjacent frames.
//!
//! Dataset layout:
//! ```text
//! <root>/intrinsics.txt              fx fy cx cy W H   (shared)
//! <root>/frames/NNNNNN/rgb.png       8-bit RGB
//! <root>/frames/NNNNNN/sparse_depth.txt   lines "u v depth_m"
//! <root>/frames/NNNNNN/pose.txt      4x4 row-major, camera -> world
//! <root>/frames/NNNNNN/sky_mask.png  optional, nonzero = sky
//! <root>/frames/NNNNNN/gt_depth.pfm  optional, synthetic ground truth
//! ```

pub mod matching;
pub mod synth;

use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector2};

use crate::error::{Error, Result};
use crate::img::{read_pfm, write_pfm, Image, ImageRgb, Mask};
use crate::math::{Intrinsics, Pose};

pub use matching::{match_features, Correspondence, CorrespondenceProvider, GtWarpMatcher, PatchMatcher};

/// One LiDAR-like sparse depth sample at an integer pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthSample {
    pub u: usize,
    pub v: usize,
    pub depth: f64,
}

/// One timestep of the input stream.
#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub rgb: ImageRgb,
    pub sparse_depth: Vec<DepthSample>,
    /// Camera-to-world rigid transform.
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub sky_mask: Option<Mask>,
    /// Dense ground-truth depth (synthetic datasets only); +inf on sky.
    pub gt_depth: Option<Image>,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn is_sky(&self, u: usize, v: usize) -> bool {
        self.sky_mask.as_ref().map_or(false, |m| m.at(u, v))
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let err = self.pose.orthonormality_error();
        if err > 1e-6 {
            return Err(bad(format!("pose rotation not orthonormal (err {err:.2e})")));
        }
        if self.pose.rotation.determinant() < 0.0 {
            return Err(bad("pose rotation is a reflection".into()));
        }
        let (w, h) = (self.width(), self.height());
        for s in &self.sparse_depth {
            if !(s.depth > 0.0) || !s.depth.is_finite() {
                return Err(bad(format!("non-positive depth {} at ({},{})", s.depth, s.u, s.v)));
            }
            if s.u >= w || s.v >= h {
                return Err(bad(format!("sample ({},{}) outside {}x{}", s.u, s.v, w, h)));
            }
        }
        if let Some(m) = &self.sky_mask {
            if m.width() != w || m.height() != h {
                return Err(bad("sky mask size mismatch".into()));
            }
        }
        Ok(())
    }
}

fn frame_dir(root: &Path, index: usize) -> PathBuf {
    root.join("frames").join(format!("{index:06}"))
}

/// Shared intrinsics plus image size, from `intrinsics.txt`.
pub fn read_intrinsics(root: &Path) -> Result<(Intrinsics, usize, usize)> {
    let path = root.join("intrinsics.txt");
    let text = std::fs::read_to_string(&path)?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format {
            path: path.clone(),
            reason: format!("bad number: {e}"),
        })?;
    if vals.len() != 6 {
        return Err(Error::Format {
            path,
            reason: format!("expected 6 values, got {}", vals.len()),
        });
    }
    Ok((
        Intrinsics {
            fx: vals[0],
            fy: vals[1],
            cx: vals[2],
            cy: vals[3],
        },
        vals[4] as usize,
        vals[5] as usize,
    ))
}

fn read_pose(path: &Path) -> Result<Pose> {
    let text = std::fs::read_to_string(path)?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad number: {e}"),
        })?;
    if vals.len() != 16 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected 16 values, got {}", vals.len()),
        });
    }
    let m = Matrix4::from_row_slice(&vals);
    Ok(Pose::from_matrix(&m))
}

fn read_sparse_depth(path: &Path) -> Result<Vec<DepthSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {}", lineno + 1, reason),
        };
        if toks.len() != 3 {
            return Err(bad(format!("expected 'u v depth', got {} tokens", toks.len())));
        }
        let u: usize = toks[0].parse().map_err(|_| bad("bad u".into()))?;
        let v: usize = toks[1].parse().map_err(|_| bad("bad v".into()))?;
        let depth: f64 = toks[2].parse().map_err(|_| bad("bad depth".into()))?;
        out.push(DepthSample { u, v, depth });
    }
    Ok(out)
}

/// Read one frame from a dataset directory.
pub fn read_frame(root: &Path, index: usize) -> Result<Frame> {
    let dir = frame_dir(root, index);
    if !dir.is_dir() {
        return Err(Error::MissingFrame(index));
    }
    let (intrinsics, w, h) = read_intrinsics(root)?;
    let rgb = ImageRgb::load_png(&dir.join("rgb.png"))?;
    if rgb.width() != w || rgb.height() != h {
        return Err(Error::Format {
            path: dir.join("rgb.png"),
            reason: format!(
                "image is {}x{}, intrinsics say {}x{}",
                rgb.width(),
                rgb.height(),
                w,
                h
            ),
        });
    }
    let pose = read_pose(&dir.join("pose.txt"))?;
    let sparse_depth = read_sparse_depth(&dir.join("sparse_depth.txt"))?;
    let sky_path = dir.join("sky_mask.png");
    let sky_mask = if sky_path.exists() {
        Some(Mask::load_png(&sky_path)?)
    } else {
        None
    };
    let gt_path = dir.join("gt_depth.pfm");
    let gt_depth = if gt_path.exists() {
        Some(read_pfm(&gt_path)?)
    } else {
        None
    };
    let frame = Frame {
        index,
        rgb,
        sparse_depth,
        pose,
        intrinsics,
        sky_mask,
        gt_depth,
    };
    frame.validate(&dir.join("pose.txt"))?;
    Ok(frame)
}

/// Write one frame (and, on first call, the shared intrinsics file).
pub fn write_frame(root: &Path, frame: &Frame) -> Result<()> {
    let dir = frame_dir(root, frame.index);
    std::fs::create_dir_all(&dir)?;
    let intr_path = root.join("intrinsics.txt");
    if !intr_path.exists() {
        let i = &frame.intrinsics;
        std::fs::write(
            &intr_path,
            format!(
                "{:.17e} {:.17e} {:.17e} {:.17e} {} {}\n",
                i.fx,
                i.fy,
                i.cx,
                i.cy,
                frame.width(),
                frame.height()
            ),
        )?;
    }
    frame.rgb.save_png(&dir.join("rgb.png"))?;
    let m = frame.pose.to_matrix();
    let mut pose_text = String::new();
    for r in 0..4 {
        for c in 0..4 {
            if c > 0 {
                pose_text.push(' ');
            }
            pose_text.push_str(&format!("{:.17e}", m[(r, c)]));
        }
        pose_text.push('\n');
    }
    std::fs::write(dir.join("pose.txt"), pose_text)?;
    let mut depth_text = String::new();
    for s in &frame.sparse_depth {
        depth_text.push_str(&format!("{} {} {:.17e}\n", s.u, s.v, s.depth));
    }
    std::fs::write(dir.join("sparse_depth.txt"), depth_text)?;
    if let Some(mask) = &frame.sky_mask {
        mask.save_png(&dir.join("sky_mask.png"))?;
    }
    if let Some(gt) = &frame.gt_depth {
        write_pfm(gt, &dir.join("gt_depth.pfm"))?;
    }
    Ok(())
}

/// Dataset handle: shared intrinsics plus frame count.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let (intrinsics, width, height) = match read_intrinsics(root) {
            Ok(v) => v,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFrame(0))
            }
            Err(e) => return Err(e),
        };
        let mut n_frames = 0;
        while frame_dir(root, n_frames).is_dir() {
            n_frames += 1;
        }
        if n_frames == 0 {
            return Err(Error::MissingFrame(0));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            intrinsics,
            width,
            height,
            n_frames,
        })
    }

    pub fn read_frame(&self, index: usize) -> Result<Frame> {
        read_frame(&self.root, index)
    }
}

/// Sub-pixel position of an integer pixel sample.
pub fn sample_pixel(u: usize, v: usize) -> Vector2<f64> {
    crate::math::pixel_center(u, v)
}

//! PLY export (binary little-endian or ascii) for extracted meshes.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::TriangleMesh;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    BinaryLittleEndian,
    Ascii,
}

pub fn write_ply(mesh: &TriangleMesh, path: &Path, format: PlyFormat) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let fmt_line = match format {
        PlyFormat::BinaryLittleEndian => "binary_little_endian 1.0",
        PlyFormat::Ascii => "ascii 1.0",
    };
    write!(
        f,
        "ply\nformat {}\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar uint vertex_indices\nend_header\n",
        fmt_line,
        mesh.vertices.len(),
        mesh.faces.len()
    )?;
    match format {
        PlyFormat::BinaryLittleEndian => {
            for v in &mesh.vertices {
                f.write_all(&(v.x as f32).to_le_bytes())?;
                f.write_all(&(v.y as f32).to_le_bytes())?;
                f.write_all(&(v.z as f32).to_le_bytes())?;
            }
            for face in &mesh.faces {
                f.write_all(&[3u8])?;
                for idx in face {
                    f.write_all(&idx.to_le_bytes())?;
                }
            }
        }
        PlyFormat::Ascii => {
            for v in &mesh.vertices {
                writeln!(f, "{} {} {}", v.x as f32, v.y as f32, v.z as f32)?;
            }
            for face in &mesh.faces {
                writeln!(f, "3 {} {} {}", face[0], face[1], face[2])?;
            }
        }
    }
    Ok(())
}

/// Read back vertex positions from an ascii PLY written by [`write_ply`]
/// (test support for end-to-end mesh checks).
pub fn read_ply_ascii_vertices(path: &Path) -> Result<Vec<nalgebra::Vector3<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut lines = text.lines();
    let mut n_vertices = None;
    for line in lines.by_ref() {
        if let Some(rest) = line.strip_prefix("element vertex ") {
            n_vertices = Some(rest.trim().parse::<usize>().map_err(|_| bad("bad count"))?);
        }
        if line.trim() == "end_header" {
            break;
        }
    }
    let n = n_vertices.ok_or_else(|| bad("no vertex element"))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let line = lines.next().ok_or_else(|| bad("truncated vertices"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad vertex"))?;
        if vals.len() < 3 {
            return Err(bad("short vertex line"));
        }
        out.push(nalgebra::Vector3::new(vals[0], vals[1], vals[2]));
    }
    Ok(out)
}

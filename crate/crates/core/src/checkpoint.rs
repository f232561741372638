//! Scene checkpoints: a self-describing binary container.
//!
//! Layout (all little-endian):
//! ```text
//! magic   8 bytes  "SPLATMAP"
//! version u32      currently 1
//! config  u32 length + TOML bytes (the full SceneConfig)
//! counts  4 x u64  free, sky, plane, segments
//! free    count x 14 f64   [position 3 | log_scale 3 | color 3 | quat 4 | opacity]
//! sky     count x 8 f64    [xz 2 | log_scale 2 | color 3 | opacity]
//! plane   count x 8 f64    followed by count x u32 segment ids
//! segment count x (4 f64 coefficients + 2 u64 valid range, MAX = open)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::math::Quat;
use crate::scene::{
    FreeGaussian, HybridScene, PlaneGaussian, PlaneSegment, SceneConfig, SphereGaussian,
};

const MAGIC: &[u8; 8] = b"SPLATMAP";
const VERSION: u32 = 1;

pub fn save_checkpoint(scene: &HybridScene, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    let config = toml::to_string(&scene.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    f.write_all(&(config.len() as u32).to_le_bytes())?;
    f.write_all(config.as_bytes())?;
    for count in [
        scene.free.len(),
        scene.sky.len(),
        scene.plane.len(),
        scene.segments.len(),
    ] {
        f.write_all(&(count as u64).to_le_bytes())?;
    }
    let mut put = |v: f64| f.write_all(&v.to_le_bytes());
    for g in &scene.free {
        for k in 0..3 {
            put(g.position[k])?;
        }
        for k in 0..3 {
            put(g.log_scale[k])?;
        }
        for k in 0..3 {
            put(g.color[k])?;
        }
        for k in 0..4 {
            put(g.rotation[k])?;
        }
        put(g.opacity)?;
    }
    for g in &scene.sky {
        for v in [
            g.xz.x,
            g.xz.y,
            g.log_scale_xz.x,
            g.log_scale_xz.y,
            g.color.x,
            g.color.y,
            g.color.z,
            g.opacity,
        ] {
            put(v)?;
        }
    }
    for g in &scene.plane {
        for v in [
            g.xz.x,
            g.xz.y,
            g.log_scale_xz.x,
            g.log_scale_xz.y,
            g.color.x,
            g.color.y,
            g.color.z,
            g.opacity,
        ] {
            put(v)?;
        }
    }
    for g in &scene.plane {
        f.write_all(&(g.segment_id as u32).to_le_bytes())?;
    }
    for s in &scene.segments {
        for k in 0..4 {
            f.write_all(&s.coefficients[k].to_le_bytes())?;
        }
        f.write_all(&(s.valid_range.0 as u64).to_le_bytes())?;
        let end = if s.valid_range.1 == usize::MAX {
            u64::MAX
        } else {
            s.valid_range.1 as u64
        };
        f.write_all(&end.to_le_bytes())?;
    }
    Ok(())
}

struct Reader {
    bytes: Vec<u8>,
    offset: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<HybridScene> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes, offset: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config is not utf-8".into()))?;
    let config: SceneConfig =
        toml::from_str(&config_text).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let n_free = r.u64()? as usize;
    let n_sky = r.u64()? as usize;
    let n_plane = r.u64()? as usize;
    let n_segments = r.u64()? as usize;

    let mut scene = HybridScene::new(config);
    for _ in 0..n_free {
        let mut v = [0.0f64; 14];
        for slot in &mut v {
            *slot = r.f64()?;
        }
        scene.free.push(FreeGaussian {
            position: Vector3::new(v[0], v[1], v[2]),
            log_scale: Vector3::new(v[3], v[4], v[5]),
            color: Vector3::new(v[6], v[7], v[8]),
            rotation: Quat::new(v[9], v[10], v[11], v[12]),
            opacity: v[13],
        });
    }
    for _ in 0..n_sky {
        let mut v = [0.0f64; 8];
        for slot in &mut v {
            *slot = r.f64()?;
        }
        scene.sky.push(SphereGaussian {
            xz: Vector2::new(v[0], v[1]),
            log_scale_xz: Vector2::new(v[2], v[3]),
            color: Vector3::new(v[4], v[5], v[6]),
            opacity: v[7],
        });
    }
    let mut plane_params = Vec::with_capacity(n_plane);
    for _ in 0..n_plane {
        let mut v = [0.0f64; 8];
        for slot in &mut v {
            *slot = r.f64()?;
        }
        plane_params.push(v);
    }
    for v in plane_params {
        let segment_id = r.u32()? as usize;
        scene.plane.push(PlaneGaussian {
            xz: Vector2::new(v[0], v[1]),
            log_scale_xz: Vector2::new(v[2], v[3]),
            color: Vector3::new(v[4], v[5], v[6]),
            opacity: v[7],
            segment_id,
        });
    }
    for _ in 0..n_segments {
        let mut c = [0.0f64; 4];
        for slot in &mut c {
            *slot = r.f64()?;
        }
        let lo = r.u64()? as usize;
        let hi = r.u64()?;
        scene.segments.push(PlaneSegment {
            coefficients: Vector4::new(c[0], c[1], c[2], c[3]),
            valid_range: (
                lo,
                if hi == u64::MAX { usize::MAX } else { hi as usize },
            ),
        });
    }
    for g in &scene.plane {
        if g.segment_id >= scene.segments.len() {
            return Err(Error::Checkpoint(format!(
                "plane gaussian references segment {} of {}",
                g.segment_id,
                scene.segments.len()
            )));
        }
    }
    scene.bump_revision();
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::mixed_scene;

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.bin");
        let scene = mixed_scene(9);
        save_checkpoint(&scene, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.free, scene.free);
        assert_eq!(back.sky, scene.sky);
        assert_eq!(back.plane, scene.plane);
        assert_eq!(back.segments, scene.segments);
        assert_eq!(back.config, scene.config);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}

//! Row-major float images (single channel and RGB) plus the PNG / PFM
//! encodings used by the dataset layout and render export.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel f64 image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn at_mut(&mut self, u: usize, v: usize) -> &mut f64 {
        &mut self.data[v * self.width + u]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// RGB f64 image, row-major, 3 channels interleaved, values nominally [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageRgb {
    pub fn zeros(width: usize, height: usize) -> Self {
        ImageRgb {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Channel-mean grayscale.
    pub fn to_gray(&self) -> Image {
        let mut g = Image::zeros(self.width, self.height);
        for i in 0..self.width * self.height {
            g.data[i] = (self.data[3 * i] + self.data[3 * i + 1] + self.data[3 * i + 2]) / 3.0;
        }
        g
    }

    pub fn max_abs_diff(&self, other: &ImageRgb) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for v in 0..self.height {
            for u in 0..self.width {
                let [r, g, b] = self.at(u, v);
                buf.put_pixel(
                    u as u32,
                    v as u32,
                    image::Rgb([to_u8(r), to_u8(g), to_u8(b)]),
                );
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<ImageRgb> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ImageRgb::zeros(w, h);
        for v in 0..h {
            for u in 0..w {
                let p = img.get_pixel(u as u32, v as u32);
                out.set(
                    u,
                    v,
                    [
                        p[0] as f64 / 255.0,
                        p[1] as f64 / 255.0,
                        p[2] as f64 / 255.0,
                    ],
                );
            }
        }
        Ok(out)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Boolean per-pixel mask (nonzero = set).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: bool) {
        self.data[v * self.width + u] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
        for v in 0..self.height {
            for u in 0..self.width {
                buf.put_pixel(
                    u as u32,
                    v as u32,
                    image::Luma([if self.at(u, v) { 255 } else { 0 }]),
                );
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Mask::new(w, h, false);
        for v in 0..h {
            for u in 0..w {
                out.set(u, v, img.get_pixel(u as u32, v as u32)[0] != 0);
            }
        }
        Ok(out)
    }
}

/// Write a single-channel PFM ("Pf", little-endian, bottom-to-top rows).
pub fn write_pfm(img: &Image, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "Pf\n{} {}\n-1.0\n", img.width(), img.height())?;
    for v in (0..img.height()).rev() {
        for u in 0..img.width() {
            f.write_all(&(img.at(u, v) as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a single-channel PFM written by [`write_pfm`] (or any conforming
/// little-endian grayscale PFM).
pub fn read_pfm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut offset = 0usize;
    let mut token = || -> Result<String> {
        while offset < bytes.len() && bytes[offset].is_ascii_whitespace() {
            offset += 1;
        }
        let start = offset;
        while offset < bytes.len() && !bytes[offset].is_ascii_whitespace() {
            offset += 1;
        }
        if start == offset {
            return Err(bad("truncated header"));
        }
        let s = String::from_utf8_lossy(&bytes[start..offset]).into_owned();
        offset += 1; // single whitespace after a token
        Ok(s)
    };

    let magic = token()?;
    if magic != "Pf" {
        return Err(bad("not a grayscale PFM"));
    }
    let w: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token()?.parse().map_err(|_| bad("bad scale"))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM not supported"));
    }
    if bytes.len() < offset + w * h * 4 {
        return Err(bad("truncated pixel data"));
    }
    let mut img = Image::zeros(w, h);
    let mut i = offset;
    for v in (0..h).rev() {
        for u in 0..w {
            let px = f32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
            *img.at_mut(u, v) = px as f64;
            i += 4;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let mut img = Image::zeros(7, 5);
        for v in 0..5 {
            for u in 0..7 {
                *img.at_mut(u, v) = (u * 10 + v) as f64 * 0.25 - 3.0;
            }
        }
        *img.at_mut(3, 2) = f64::INFINITY;
        write_pfm(&img, &path).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            if a.is_finite() {
                assert!((a - b).abs() < 1e-6);
            } else {
                assert!(b.is_infinite());
            }
        }
    }

    #[test]
    fn png_roundtrip_is_bit_exact_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let mut img = ImageRgb::zeros(6, 4);
        for v in 0..4 {
            for u in 0..6 {
                let k = (u + 6 * v) as f64;
                img.set(
                    u,
                    v,
                    [
                        (k * 7.0 % 256.0) / 255.0,
                        (k * 13.0 % 256.0) / 255.0,
                        (k * 29.0 % 256.0) / 255.0,
                    ],
                );
            }
        }
        img.save_png(&path).unwrap();
        let back = ImageRgb::load_png(&path).unwrap();
        assert_eq!(img, back);
    }
}

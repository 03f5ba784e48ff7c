//! Grayscale images, bilinear resampling and PNG + JSON sidecar I/O.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f32 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        (sum / self.data.len() as f64) as f32
    }

    pub fn std_dev(&self) -> f32 {
        let mean = self.mean() as f64;
        let var: f64 = self
            .data
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / self.data.len() as f64;
        var.sqrt() as f32
    }

    /// Bilinear sample at continuous pixel coordinates where pixel `(c, r)`
    /// has its center at `(c + 0.5, r + 0.5)`. Coordinates outside the pixel
    /// centers are clamped to the border.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> f32 {
        let x = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!(self.width, other.width);
        assert_eq!(self.height, other.height);
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        (sum / self.data.len() as f64) as f32
    }

    /// Centered crop keeping `fraction` of each dimension.
    pub fn center_crop(&self, fraction: f64) -> Image {
        let w = ((self.width as f64 * fraction).round() as usize).clamp(1, self.width);
        let h = ((self.height as f64 * fraction).round() as usize).clamp(1, self.height);
        let c0 = (self.width - w) / 2;
        let r0 = (self.height - h) / 2;
        let mut data = Vec::with_capacity(w * h);
        for r in r0..r0 + h {
            data.extend_from_slice(&self.data[r * self.width + c0..r * self.width + c0 + w]);
        }
        Image {
            width: w,
            height: h,
            data,
        }
    }

    /// Intensities quantized to 8 bits, the representation written to PNG.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            width,
            height,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// 64-bit FNV-1a hash over the dimensions and the 8-bit quantized
    /// pixels. Images that round-trip through PNG keep their fingerprint.
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        };
        for b in (self.width as u32)
            .to_le_bytes()
            .into_iter()
            .chain((self.height as u32).to_le_bytes())
        {
            feed(b);
        }
        for &v in &self.data {
            feed(quantize_u8(v));
        }
        h
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = img.to_luma8();
        Image::from_u8(gray.width() as usize, gray.height() as usize, gray.as_raw())
    }
}

#[inline]
fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// JSON metadata written next to every PNG artifact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub width_px: usize,
    pub height_px: usize,
    /// Ground sampling distance of the PNG pixels.
    pub meters_per_pixel: f64,
    /// World coordinates of the raster's lower-left corner (maps) or the
    /// camera center (rendered views).
    pub origin_x: f64,
    pub origin_y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Free-form producer metadata (scene parameters, lighting, ...).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

/// Path of the JSON sidecar belonging to `png`.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

pub fn write_sidecar(png: &Path, sidecar: &Sidecar) -> Result<()> {
    let path = sidecar_path(png);
    let text = serde_json::to_string_pretty(sidecar)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_sidecar(png: &Path) -> Result<Sidecar> {
    let path = sidecar_path(png);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rotate about the image center by `delta_deg` with bilinear resampling.
///
/// Output pixel at offset `(dx, dy)` from the center (rows pointing down)
/// samples the input at `(dx cos d - dy sin d, dx sin d + dy cos d)`. For a
/// nadir view rendered at heading `h`, the result approximates the view at
/// heading `h - delta_deg`. Samples landing outside the frame take the
/// input's mean intensity.
pub fn rotate_image(img: &Image, delta_deg: f64) -> Result<Image> {
    if !delta_deg.is_finite() || delta_deg.abs() > 45.0 {
        return Err(Error::InvalidArgument(format!(
            "rotation must lie in [-45, 45] degrees, got {delta_deg}"
        )));
    }
    if delta_deg == 0.0 {
        return Ok(img.clone());
    }
    let fill = img.mean();
    let (s, c) = delta_deg.to_radians().sin_cos();
    let (w, h) = (img.width as f64, img.height as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let mut out = Vec::with_capacity(img.data.len());
    for r in 0..img.height {
        let dy = r as f64 + 0.5 - cy;
        for col in 0..img.width {
            let dx = col as f64 + 0.5 - cx;
            let u = cx + dx * c - dy * s;
            let v = cy + dx * s + dy * c;
            // Pixel centers span [0.5, w - 0.5]; anything further out has no
            // support in the source image.
            if u < 0.5 || v < 0.5 || u > w - 0.5 || v > h - 0.5 {
                out.push(fill);
            } else {
                out.push(img.sample_bilinear(u, v));
            }
        }
    }
    Image::new(img.width, img.height, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        let data = (0..h)
            .flat_map(|r| (0..w).map(move |c| ((c + 2 * r) % 17) as f32 / 16.0))
            .collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = gradient(32, 16);
        assert_eq!(rotate_image(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn rotate_constant_stays_constant() {
        let img = Image::filled(40, 20, 0.37);
        for d in [-30.0, -5.0, 1.0, 12.5, 45.0] {
            let out = rotate_image(&img, d).unwrap();
            assert!(out.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn rotate_rejects_large_angles() {
        let img = Image::filled(8, 8, 0.5);
        assert!(rotate_image(&img, 45.5).is_err());
        assert!(rotate_image(&img, f64::NAN).is_err());
    }

    #[test]
    fn bilinear_hits_pixel_centers() {
        let img = gradient(5, 4);
        for r in 0..4 {
            for c in 0..5 {
                let v = img.sample_bilinear(c as f64 + 0.5, r as f64 + 0.5);
                assert!((v - img.get(c, r)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn png_round_trip_preserves_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let img = gradient(12, 7);
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.fingerprint(), img.fingerprint());
        assert!(img.mean_abs_diff(&back) < 1.0 / 255.0);
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Image::new(3, 3, vec![0.0; 8]).is_err());
        assert!(Image::new(0, 3, vec![]).is_err());
    }
}

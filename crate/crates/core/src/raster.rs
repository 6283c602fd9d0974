//! In-memory images and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]` (normal maps use `[-1, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 3]>,
}

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        self.pixels[row * self.width + col] = rgb;
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| p.map(|c| to_u8(c) as f32 / 255.0)).collect(),
        }
    }

    /// Bilinear resample with pixel-center alignment; same size is a copy.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sample = |len: usize, new_len: usize, i: usize| {
            let x = ((i as f64 + 0.5) * len as f64 / new_len as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = x.floor() as usize;
            (i0, (i0 + 1).min(len - 1), (x - i0 as f64) as f32)
        };
        let mut out = Self::filled(width, height, [0.0; 3]);
        for r in 0..height {
            let (r0, r1, fr) = sample(self.height, height, r);
            for c in 0..width {
                let (c0, c1, fc) = sample(self.width, width, c);
                let (a, b) = (self.get(r0, c0), self.get(r0, c1));
                let (d, e) = (self.get(r1, c0), self.get(r1, c1));
                out.set(
                    r,
                    c,
                    std::array::from_fn(|k| {
                        let top = a[k] + fc * (b[k] - a[k]);
                        let bottom = d[k] + fc * (e[k] - d[k]);
                        top + fr * (bottom - top)
                    }),
                );
            }
        }
        out
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let raw: Vec<u8> = self.pixels.iter().flat_map(|p| p.map(to_u8)).collect();
        encode_png(
            ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer sized from dimensions"),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?;
        let rgb = img.to_rgb8();
        Ok(Self {
            width: rgb.width() as usize,
            height: rgb.height() as usize,
            pixels: rgb.pixels().map(|p| p.0.map(|c| c as f32 / 255.0)).collect(),
        })
    }

    /// Encodes a `[-1, 1]` normal map as `(n + 1) / 2`.
    pub fn normals_to_png_bytes(&self) -> Vec<u8> {
        let mapped = Self {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|n| {
                    if *n == [0.0; 3] {
                        [0.0; 3]
                    } else {
                        n.map(|c| 0.5 * (c + 1.0))
                    }
                })
                .collect(),
        };
        mapped.to_png_bytes()
    }
}

impl GrayImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// 8-bit PNG of values in `[0, 1]`.
    pub fn to_png8_bytes(&self) -> Vec<u8> {
        let raw: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        encode_png(
            ImageBuffer::<Luma<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer sized from dimensions"),
        )
    }

    /// 16-bit PNG with `[lo, hi]` mapped linearly onto the full range.
    /// Zero (no surface) stays zero.
    pub fn to_png16_bytes(&self, lo: f32, hi: f32) -> Vec<u8> {
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|v| {
                if *v <= 0.0 {
                    0
                } else {
                    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 65535.0).round() as u16
                }
            })
            .collect();
        encode_png(
            ImageBuffer::<Luma<u16>, _>::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer sized from dimensions"),
        )
    }
}

fn encode_png<P, C>(buffer: ImageBuffer<P, C>) -> Vec<u8>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = std::io::Cursor::new(Vec::new());
    buffer
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::filled(5, 3, [0.2, 0.4, 0.6]);
        img.set(1, 2, [1.0, 0.0, 0.5]);
        let img = img.quantized();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        assert_eq!(RgbImage::load_png(&path).unwrap(), img);
    }

    #[test]
    fn resize_keeps_constant_images_and_identity() {
        let img = RgbImage::filled(6, 4, [0.25, 0.5, 0.75]);
        assert!(img.resized(17, 9).pixels.iter().all(|p| *p == [0.25, 0.5, 0.75]));
        let mut ramp = RgbImage::filled(4, 1, [0.0; 3]);
        for c in 0..4 {
            ramp.set(0, c, [c as f32; 3]);
        }
        assert_eq!(ramp.resized(4, 1), ramp);
        // doubling a linear ramp keeps it linear away from the clamped ends
        let up = ramp.resized(8, 1);
        assert!((up.get(0, 3)[0] - 1.25).abs() < 1e-6);
        assert!((up.get(0, 4)[0] - 1.75).abs() < 1e-6);
    }

    #[test]
    fn missing_png_is_reported() {
        let err = RgbImage::load_png(Path::new("/nonexistent/a.png")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn depth_png_is_sixteen_bit() {
        let mut d = GrayImage::zeros(2, 1);
        d.data[1] = 3.0;
        let bytes = d.to_png16_bytes(1.0, 3.0);
        let img = image::load_from_memory(&bytes).unwrap().to_luma16();
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(1, 0).0[0], 65535);
    }
}

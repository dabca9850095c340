//! Minimal image containers and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::io::FormatError;

/// Single-channel intensity image, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Clamped-border access with signed coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Separable Gaussian blur with a kernel truncated at 4σ.
    pub fn gaussian_blur(&self, sigma: f32) -> GrayImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = kernel.len() / 2;
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0f32; w * h];
        for (src, dst) in self.data.chunks_exact(w).zip(tmp.chunks_exact_mut(w)) {
            for (x, out) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                if x >= r && x + r < w {
                    for (k, v) in kernel.iter().zip(&src[x - r..]) {
                        acc += k * v;
                    }
                } else {
                    for (i, k) in kernel.iter().enumerate() {
                        let xi = (x + i).saturating_sub(r).min(w - 1);
                        acc += k * src[xi];
                    }
                }
                *out = acc;
            }
        }
        // Row by row so that each output pixel sums its taps in the same
        // order as the horizontal pass.
        let mut out = GrayImage::new(w, h, 0.0);
        for (y, dst) in out.data.chunks_exact_mut(w).enumerate() {
            for (i, k) in kernel.iter().enumerate() {
                let yi = (y + i).saturating_sub(r).min(h - 1);
                for (o, v) in dst.iter_mut().zip(&tmp[yi * w..(yi + 1) * w]) {
                    *o += k * v;
                }
            }
        }
        out
    }

    /// Half-resolution image taking every second pixel.
    pub fn downsample(&self) -> GrayImage {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = GrayImage::new(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(2 * x, 2 * y));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<(), FormatError> {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                Luma([to_u8(self.get(x as usize, y as usize))])
            });
        save(path, buf)
    }

    pub fn load_png(path: &Path) -> Result<Self, FormatError> {
        let img = open(path)?.to_luma32f();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    }
}

pub(crate) fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer positions), clamped at the border.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let x0 = u.floor();
        let y0 = v.floor();
        let (fx, fy) = (u - x0, v - y0);
        let clamp = |x: f64, n: usize| (x.max(0.0) as usize).min(n - 1);
        let (xa, xb) = (clamp(x0, self.width), clamp(x0 + 1.0, self.width));
        let (ya, yb) = (clamp(y0, self.height), clamp(y0 + 1.0, self.height));
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let a = self.get(xa, ya)[c] as f64;
            let b = self.get(xb, ya)[c] as f64;
            let cc = self.get(xa, yb)[c] as f64;
            let d = self.get(xb, yb)[c] as f64;
            *o = (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (cc * (1.0 - fx) + d * fx) * fy;
        }
        out
    }

    /// Luma conversion (Rec. 601 weights).
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), FormatError> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let c = self.get(x as usize, y as usize);
                Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
            });
        save(path, buf)
    }

    pub fn load_png(path: &Path) -> Result<Self, FormatError> {
        let img = open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .pixels()
            .map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
            .collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

/// Metric depth image; `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.data[y * self.width + x] = d;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }

    /// Writes a 16-bit PNG in millimeters (values above 65.535 m saturate).
    pub fn save_png(&self, path: &Path) -> Result<(), FormatError> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let mm = (self.get(x as usize, y as usize) * 1000.0).round();
                Luma([mm.clamp(0.0, u16::MAX as f64) as u16])
            });
        save(path, buf)
    }

    pub fn load_png(path: &Path) -> Result<Self, FormatError> {
        let img = open(path)?;
        let img = match img {
            image::DynamicImage::ImageLuma16(b) => b,
            _ => {
                return Err(FormatError::parse(
                    path,
                    0,
                    "depth must be a 16-bit single-channel PNG",
                ))
            }
        };
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p[0] as f64 / 1000.0).collect(),
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn open(path: &Path) -> Result<image::DynamicImage, FormatError> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => FormatError::io(path, io),
        other => FormatError::parse(path, 0, other.to_string()),
    })
}

fn save<P>(path: &Path, buf: ImageBuffer<P, Vec<P::Subpixel>>) -> Result<(), FormatError>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| FormatError::io(parent, e))?;
    }
    buf.save(path)
        .map_err(|e| FormatError::parse(path, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_png_is_millimeter_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = DepthImage::new(4, 3);
        d.set(1, 1, 1.234);
        d.set(3, 2, 4.5);
        let p = dir.path().join("d.png");
        d.save_png(&p).unwrap();
        let back = DepthImage::load_png(&p).unwrap();
        assert_eq!(back.get(1, 1), 1.234);
        assert_eq!(back.get(3, 2), 4.5);
        assert_eq!(back.get(0, 0), 0.0);
    }

    #[test]
    fn color_png_loads_as_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ColorImage::new(2, 2, [1.0, 0.0, 0.5]);
        c.data[3] = [0.0, 1.0, 0.0];
        let p = dir.path().join("c.png");
        c.save_png(&p).unwrap();
        let back = ColorImage::load_png(&p).unwrap();
        assert_eq!(back.get(1, 1), [0.0, 1.0, 0.0]);
        assert!((back.get(0, 0)[2] - 0.5).abs() < 1.0 / 255.0);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let g = GrayImage::new(9, 7, 0.25);
        let b = g.gaussian_blur(1.5);
        assert!(b.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }
}

//! Procedural textures: high-contrast logo patterns and low-contrast
//! background clutter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::GrayImage;

/// Rotated ellipses and rectangles of random gray level at two scales,
/// stratified over grids so keypoints cover the whole pattern including
/// its corners. Coarse shapes keep the logo detectable when it is small
/// in the image; no two shapes look alike.
pub fn logo_texture(seed: u64, width: usize, height: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (x, y, radius, aspect, angle, value, rectangle)
    let mut shapes: Vec<(f64, f64, f64, f64, f64, f32, bool)> = Vec::new();
    // Sizes are for a 150 px wide logo.
    let unit = width as f64 / 150.0;
    for (cell, rmin, rmax) in [(36.0 * unit, 8.0 * unit, 15.0 * unit), (18.0 * unit, 3.0 * unit, 6.0 * unit)] {
        let (cx, cy) = ((width as f64 / cell).ceil() as usize, (height as f64 / cell).ceil() as usize);
        for j in 0..cy {
            for i in 0..cx {
                let x = (i as f64 + rng.random_range(0.2..0.8)) * cell;
                let y = (j as f64 + rng.random_range(0.2..0.8)) * cell;
                let r = rng.random_range(rmin..rmax);
                let aspect = rng.random_range(0.5..2.0);
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let v = rng.random_range(0.0f32..1.0);
                let v = if v < 0.5 { 0.05 + 0.5 * v } else { 0.45 + 0.5 * v };
                shapes.push((x, y, r, aspect, angle, v, rng.random::<f64>() < 0.4));
            }
        }
    }
    let mut img = GrayImage::new(width, height, 0.5);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 0.5f32;
            for (sx, sy, r, a, th, val, rect) in &shapes {
                let (c, s) = (th.cos(), th.sin());
                let (u, w) = ((px - sx) * c + (py - sy) * s, (py - sy) * c - (px - sx) * s);
                let (du, dw) = (u / (r * a), w * a / r);
                let inside = if *rect { du.abs() <= 1.0 && dw.abs() <= 1.0 } else { du * du + dw * dw <= 1.0 };
                if inside {
                    v = *val;
                }
            }
            img.set(x, y, v);
        }
    }
    img.gaussian_blur(0.7 * unit as f32)
}

/// Smooth low-contrast noise for walls and floor.
pub fn clutter_texture(seed: u64, width: usize, height: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = GrayImage::new(width, height, 0.0);
    img.data.iter_mut().for_each(|v| *v = rng.random_range(0.3..0.7));
    img.gaussian_blur(2.0)
}

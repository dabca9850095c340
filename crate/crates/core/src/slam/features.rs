//! Scale-space keypoints with gradient-histogram descriptors, and the
//! binary feature file format.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::SlamError;
use crate::io::{write_bytes, FormatError};
use crate::raster::GrayImage;

pub const DESCRIPTOR_LEN: usize = 128;
pub type Descriptor = [f32; DESCRIPTOR_LEN];

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub pixel: Vector2<f64>,
    /// Blur scale in input pixels.
    pub scale: f64,
    pub orientation: f64,
    /// Detector response magnitude; not persisted.
    pub response: f32,
    pub descriptor: Descriptor,
}

/// Source of keypoints for a frame.
pub trait FeatureSource: Sync {
    fn features(&self, frame_id: u64, image: &GrayImage) -> Result<Vec<Keypoint>, SlamError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftParams {
    pub octave_layers: usize,
    pub sigma: f64,
    pub contrast_threshold: f64,
    pub edge_threshold: f64,
    /// Keep only the strongest keypoints.
    pub max_features: Option<usize>,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            octave_layers: 3,
            sigma: 1.6,
            contrast_threshold: 0.04,
            edge_threshold: 10.0,
            max_features: Some(1500),
        }
    }
}

/// Default detector.
#[derive(Debug, Clone, Default)]
pub struct SiftLike {
    pub params: SiftParams,
}

impl FeatureSource for SiftLike {
    fn features(&self, _frame_id: u64, image: &GrayImage) -> Result<Vec<Keypoint>, SlamError> {
        extract_features(image, &self.params)
    }
}

/// Reads `frame_<id>.feat` files from a directory.
#[derive(Debug, Clone)]
pub struct FeatureFiles {
    pub dir: PathBuf,
}

impl FeatureSource for FeatureFiles {
    fn features(&self, frame_id: u64, _image: &GrayImage) -> Result<Vec<Keypoint>, SlamError> {
        Ok(read_features(&feature_path(&self.dir, frame_id))?)
    }
}

pub fn feature_path(dir: &Path, frame_id: u64) -> PathBuf {
    dir.join(format!("frame_{frame_id}.feat"))
}

const BORDER: usize = 5;
const MAX_REFINE: usize = 5;
const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f64 = 0.8;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_MAG_CLIP: f32 = 0.2;

struct Octave {
    gauss: Vec<GrayImage>,
    dog: Vec<GrayImage>,
}

fn build_pyramid(image: &GrayImage, p: &SiftParams) -> Vec<Octave> {
    let s = p.octave_layers;
    let k = 2f64.powf(1.0 / s as f64);
    let mut incr = vec![0.0; s + 3];
    for (i, v) in incr.iter_mut().enumerate().skip(1) {
        let prev = p.sigma * k.powi(i as i32 - 1);
        *v = ((prev * k).powi(2) - prev.powi(2)).sqrt();
    }
    // Input is assumed to carry a blur of half a pixel.
    let base = image.gaussian_blur((p.sigma * p.sigma - 0.25).max(0.01).sqrt() as f32);
    let min_dim = image.width.min(image.height) as f64;
    let n_oct = ((min_dim.log2() - 3.0).floor() as usize).max(1);
    let mut octaves: Vec<Octave> = Vec::with_capacity(n_oct);
    for o in 0..n_oct {
        let first = if o == 0 {
            base.clone()
        } else {
            octaves[o - 1].gauss[s].downsample()
        };
        let mut gauss = vec![first];
        for sigma in incr.iter().skip(1) {
            let next = gauss.last().unwrap().gaussian_blur(*sigma as f32);
            gauss.push(next);
        }
        let dog = gauss
            .windows(2)
            .map(|w| GrayImage {
                width: w[0].width,
                height: w[0].height,
                data: w[1].data.iter().zip(&w[0].data).map(|(a, b)| a - b).collect(),
            })
            .collect();
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

struct Candidate {
    octave: usize,
    layer: usize,
    /// Octave-local sub-pixel position.
    x: f64,
    y: f64,
    /// Octave-local scale.
    scale: f64,
    response: f32,
}

fn is_extremum(dog: &[GrayImage], layer: usize, x: usize, y: usize) -> bool {
    let v = dog[layer].get(x, y);
    let (mut is_max, mut is_min) = (v > 0.0, v < 0.0);
    for l in layer - 1..=layer + 1 {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if l == layer && xx == x && yy == y {
                    continue;
                }
                let n = dog[l].get(xx, yy);
                is_max &= v >= n;
                is_min &= v <= n;
                if !is_max && !is_min {
                    return false;
                }
            }
        }
    }
    true
}

fn refine(oct: &Octave, o: usize, layer: usize, x: usize, y: usize, p: &SiftParams) -> Option<Candidate> {
    let s = p.octave_layers;
    let dog = &oct.dog;
    let (w, h) = (dog[0].width, dog[0].height);
    let (mut l, mut c, mut r) = (layer, x, y);
    let mut offset = Vector3::zeros();
    let mut grad = Vector3::zeros();
    let mut converged = false;
    for _ in 0..MAX_REFINE {
        let d = |ll: usize, xx: usize, yy: usize| dog[ll].get(xx, yy) as f64;
        let v = d(l, c, r);
        grad = Vector3::new(
            (d(l, c + 1, r) - d(l, c - 1, r)) * 0.5,
            (d(l, c, r + 1) - d(l, c, r - 1)) * 0.5,
            (d(l + 1, c, r) - d(l - 1, c, r)) * 0.5,
        );
        let dxx = d(l, c + 1, r) + d(l, c - 1, r) - 2.0 * v;
        let dyy = d(l, c, r + 1) + d(l, c, r - 1) - 2.0 * v;
        let dss = d(l + 1, c, r) + d(l - 1, c, r) - 2.0 * v;
        let dxy = (d(l, c + 1, r + 1) - d(l, c - 1, r + 1) - d(l, c + 1, r - 1) + d(l, c - 1, r - 1)) * 0.25;
        let dxs = (d(l + 1, c + 1, r) - d(l + 1, c - 1, r) - d(l - 1, c + 1, r) + d(l - 1, c - 1, r)) * 0.25;
        let dys = (d(l + 1, c, r + 1) - d(l + 1, c, r - 1) - d(l - 1, c, r + 1) + d(l - 1, c, r - 1)) * 0.25;
        let hess = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        offset = -hess.lu().solve(&grad)?;
        if offset.iter().all(|v| v.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|v| v.abs() > (w + h) as f64) {
            return None;
        }
        let step = |base: usize, delta: f64| base as i64 + delta.round() as i64;
        let (nc, nr, nl) = (step(c, offset.x), step(r, offset.y), step(l, offset.z));
        if nl < 1
            || nl > s as i64
            || nc < BORDER as i64
            || nc >= (w - BORDER) as i64
            || nr < BORDER as i64
            || nr >= (h - BORDER) as i64
        {
            return None;
        }
        (c, r, l) = (nc as usize, nr as usize, nl as usize);
    }
    if !converged {
        return None;
    }
    let contrast = dog[l].get(c, r) as f64 + 0.5 * grad.dot(&offset);
    if contrast.abs() * (s as f64) < p.contrast_threshold {
        return None;
    }
    let d = |xx: usize, yy: usize| dog[l].get(xx, yy) as f64;
    let v = d(c, r);
    let dxx = d(c + 1, r) + d(c - 1, r) - 2.0 * v;
    let dyy = d(c, r + 1) + d(c, r - 1) - 2.0 * v;
    let dxy = (d(c + 1, r + 1) - d(c - 1, r + 1) - d(c + 1, r - 1) + d(c - 1, r - 1)) * 0.25;
    let (tr, det) = (dxx + dyy, dxx * dyy - dxy * dxy);
    let e = p.edge_threshold;
    if det <= 0.0 || tr * tr * e >= (e + 1.0).powi(2) * det {
        return None;
    }
    Some(Candidate {
        octave: o,
        layer: l,
        x: c as f64 + offset.x,
        y: r as f64 + offset.y,
        scale: p.sigma * 2f64.powf((l as f64 + offset.z) / s as f64),
        response: contrast.abs() as f32,
    })
}

/// Central-difference gradient magnitude and angle of one pyramid level;
/// zero on the one-pixel border.
struct Gradients {
    width: usize,
    height: usize,
    mag: Vec<f64>,
    angle: Vec<f64>,
}

impl Gradients {
    fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width, img.height);
        let (mut mag, mut angle) = (vec![0.0; w * h], vec![0.0; w * h]);
        for y in 1..h.saturating_sub(1) {
            for x in 1..w - 1 {
                let gx = (img.get(x + 1, y) - img.get(x - 1, y)) as f64;
                let gy = (img.get(x, y + 1) - img.get(x, y - 1)) as f64;
                mag[y * w + x] = (gx * gx + gy * gy).sqrt();
                angle[y * w + x] = gy.atan2(gx);
            }
        }
        Self {
            width: w,
            height: h,
            mag,
            angle,
        }
    }

    #[inline]
    fn inside(&self, px: i64, py: i64) -> bool {
        px >= 1 && py >= 1 && px < self.width as i64 - 1 && py < self.height as i64 - 1
    }
}

/// Dominant gradient orientations around a candidate.
fn orientations(g: &Gradients, x: f64, y: f64, scale: f64) -> Vec<f64> {
    let sigma = 1.5 * scale;
    let radius = (3.0 * sigma).round() as i64;
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    let mut hist = [0.0f64; ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (cx + dx, cy + dy);
            if !g.inside(px, py) {
                continue;
            }
            let i = py as usize * g.width + px as usize;
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            let ang = g.angle[i].rem_euclid(2.0 * PI);
            let bin = ((ang / (2.0 * PI) * ORI_BINS as f64).round() as usize) % ORI_BINS;
            hist[bin] += w * g.mag[i];
        }
    }
    let n = ORI_BINS;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            (hist[(i + n - 2) % n] + hist[(i + 2) % n]) / 16.0
                + (hist[(i + n - 1) % n] + hist[(i + 1) % n]) * 4.0 / 16.0
                + hist[i] * 6.0 / 16.0
        })
        .collect();
    let max = smooth.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..n {
        let (l, r) = (smooth[(i + n - 1) % n], smooth[(i + 1) % n]);
        let v = smooth[i];
        if v > l && v > r && v >= ORI_PEAK_RATIO * max {
            let shift = 0.5 * (l - r) / (l - 2.0 * v + r);
            let bin = (i as f64 + shift).rem_euclid(n as f64);
            out.push(bin / n as f64 * 2.0 * PI);
        }
    }
    out
}

fn descriptor(g: &Gradients, x: f64, y: f64, scale: f64, ori: f64) -> Option<Descriptor> {
    let d = DESC_WIDTH;
    let nb = DESC_BINS;
    let hist_width = 3.0 * scale;
    let radius = (hist_width * std::f64::consts::SQRT_2 * (d as f64 + 1.0) * 0.5).round() as i64;
    let radius = radius.min(((g.width.pow(2) + g.height.pow(2)) as f64).sqrt() as i64);
    let (cos_t, sin_t) = (ori.cos() / hist_width, ori.sin() / hist_width);
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    let exp_scale = -1.0 / (d as f64 * d as f64 * 0.5);
    let mut hist = vec![0.0f64; (d + 2) * (d + 2) * (nb + 2)];
    let idx = |r: usize, c: usize, o: usize| (r * (d + 2) + c) * (nb + 2) + o;
    for i in -radius..=radius {
        for j in -radius..=radius {
            let c_rot = j as f64 * cos_t + i as f64 * sin_t;
            let r_rot = -(j as f64) * sin_t + i as f64 * cos_t;
            let rbin = r_rot + d as f64 / 2.0 - 0.5;
            let cbin = c_rot + d as f64 / 2.0 - 0.5;
            let (px, py) = (cx + j, cy + i);
            if !(rbin > -1.0 && rbin < d as f64 && cbin > -1.0 && cbin < d as f64) {
                continue;
            }
            if !g.inside(px, py) {
                continue;
            }
            let gi = py as usize * g.width + px as usize;
            let mag = g.mag[gi] * ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let obin = (g.angle[gi] - ori).rem_euclid(2.0 * PI) * nb as f64 / (2.0 * PI);
            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (dr, dc, dob) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0) = ((r0 + 1.0) as usize, (c0 + 1.0) as usize);
            let o0 = (o0 as usize) % nb;
            for (rr, wr) in [(r0, 1.0 - dr), (r0 + 1, dr)] {
                for (cc, wc) in [(c0, 1.0 - dc), (c0 + 1, dc)] {
                    for (oo, wo) in [(o0, 1.0 - dob), ((o0 + 1) % nb, dob)] {
                        hist[idx(rr, cc, oo)] += mag * wr * wc * wo;
                    }
                }
            }
        }
    }
    let mut desc = [0.0f32; DESCRIPTOR_LEN];
    for r in 0..d {
        for c in 0..d {
            for o in 0..nb {
                desc[(r * d + c) * nb + o] = hist[idx(r + 1, c + 1, o)] as f32;
            }
        }
    }
    let norm = desc.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm <= 0.0 {
        return None;
    }
    for v in desc.iter_mut() {
        *v = (*v / norm).min(DESC_MAG_CLIP);
    }
    normalize(&mut desc).then_some(desc)
}

/// Scales to unit length; false for a zero vector.
pub fn normalize(d: &mut Descriptor) -> bool {
    let n = d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if n <= 0.0 {
        return false;
    }
    d.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
    true
}

/// Detects difference-of-Gaussian extrema and describes each dominant
/// orientation. Output is sorted by decreasing response.
pub fn extract_features(image: &GrayImage, p: &SiftParams) -> Result<Vec<Keypoint>, SlamError> {
    if image.width < 32 || image.height < 32 {
        return Err(SlamError::ImageTooSmall {
            width: image.width,
            height: image.height,
        });
    }
    let pyr = build_pyramid(image, p);
    let threshold = (0.5 * p.contrast_threshold / p.octave_layers as f64) as f32;
    let mut cands = Vec::new();
    for (o, oct) in pyr.iter().enumerate() {
        let (w, h) = (oct.dog[0].width, oct.dog[0].height);
        if w <= 2 * BORDER || h <= 2 * BORDER {
            continue;
        }
        for layer in 1..=p.octave_layers {
            let found: Vec<Candidate> = (BORDER..h - BORDER)
                .into_par_iter()
                .flat_map_iter(|y| {
                    (BORDER..w - BORDER).filter_map(move |x| {
                        let v = oct.dog[layer].get(x, y);
                        if v.abs() > threshold && is_extremum(&oct.dog, layer, x, y) {
                            refine(oct, o, layer, x, y, p)
                        } else {
                            None
                        }
                    })
                })
                .collect();
            cands.extend(found);
        }
    }
    // Gradients of the levels that hold candidates.
    let levels: BTreeSet<(usize, usize)> = cands.iter().map(|c| (c.octave, c.layer)).collect();
    let grads: BTreeMap<(usize, usize), Gradients> = levels
        .into_par_iter()
        .map(|(o, l)| ((o, l), Gradients::new(&pyr[o].gauss[l])))
        .collect();
    let mut kps: Vec<Keypoint> = cands
        .par_iter()
        .flat_map_iter(|c| {
            let img = &grads[&(c.octave, c.layer)];
            let f = 2f64.powi(c.octave as i32);
            orientations(img, c.x, c.y, c.scale)
                .into_iter()
                .filter_map(|ori| {
                    descriptor(img, c.x, c.y, c.scale, ori).map(|descriptor| Keypoint {
                        pixel: Vector2::new(c.x * f, c.y * f),
                        scale: c.scale * f,
                        orientation: ori,
                        response: c.response,
                        descriptor,
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect();
    kps.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.pixel.y.total_cmp(&b.pixel.y))
            .then(a.pixel.x.total_cmp(&b.pixel.x))
            .then(a.orientation.total_cmp(&b.orientation))
    });
    if let Some(n) = p.max_features {
        kps.truncate(n);
    }
    Ok(kps)
}

/// `u32` count, then per keypoint `u v scale orientation` as `f64` and the
/// descriptor as 128 `f32`, all little-endian.
pub fn write_features(path: &Path, kps: &[Keypoint]) -> Result<(), FormatError> {
    let mut out = Vec::with_capacity(4 + kps.len() * (32 + 4 * DESCRIPTOR_LEN));
    out.extend_from_slice(&(kps.len() as u32).to_le_bytes());
    for k in kps {
        for v in [k.pixel.x, k.pixel.y, k.scale, k.orientation] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &k.descriptor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_features(path: &Path) -> Result<Vec<Keypoint>, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
    let rec = 32 + 4 * DESCRIPTOR_LEN;
    if bytes.len() < 4 {
        return Err(FormatError::parse(path, 0, "missing keypoint count"));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() != 4 + n * rec {
        return Err(FormatError::parse(
            path,
            0,
            format!("expected {} bytes for {n} keypoints, found {}", 4 + n * rec, bytes.len()),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let b = &bytes[4 + i * rec..4 + (i + 1) * rec];
            let f = |k: usize| f64::from_le_bytes(b[8 * k..8 * k + 8].try_into().unwrap());
            let mut descriptor = [0.0f32; DESCRIPTOR_LEN];
            for (j, d) in descriptor.iter_mut().enumerate() {
                *d = f32::from_le_bytes(b[32 + 4 * j..36 + 4 * j].try_into().unwrap());
            }
            Keypoint {
                pixel: Vector2::new(f(0), f(1)),
                scale: f(2),
                orientation: f(3),
                response: 0.0,
                descriptor,
            }
        })
        .collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::slam::match_features;

    /// Smooth random blobs; rich in scale-space extrema.
    pub fn blob_image(w: usize, h: usize, seed: u64) -> GrayImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..(w * h / 300))
            .map(|_| {
                (
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.0..h as f64),
                    rng.random_range(1.5..6.0),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect();
        let mut img = GrayImage::new(w, h, 0.5);
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.5;
                for (bx, by, s, a) in &blobs {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    if d2 < 16.0 * s * s {
                        v += a * (-d2 / (2.0 * s * s)).exp();
                    }
                }
                img.set(x, y, v.clamp(0.0, 1.0) as f32);
            }
        }
        img
    }

    #[test]
    fn uniform_image_has_no_features() {
        let img = GrayImage::new(64, 64, 0.5);
        assert!(extract_features(&img, &SiftParams::default()).unwrap().is_empty());
    }

    #[test]
    fn too_small() {
        let img = GrayImage::new(31, 64, 0.5);
        assert!(matches!(
            extract_features(&img, &SiftParams::default()),
            Err(SlamError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn deterministic_sorted_unit_norm() {
        let img = blob_image(160, 120, 1);
        let a = extract_features(&img, &SiftParams::default()).unwrap();
        let b = extract_features(&img.clone(), &SiftParams::default()).unwrap();
        assert!(a.len() > 20, "{} keypoints", a.len());
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].response >= w[1].response));
        for k in &a {
            let n: f64 = k.descriptor.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert!(k.scale > 0.0);
            assert!(k.pixel.x >= 0.0 && k.pixel.x < 160.0 && k.pixel.y >= 0.0 && k.pixel.y < 120.0);
        }
    }

    #[test]
    fn shifted_image_matches() {
        let (w, h) = (200, 160);
        let big = blob_image(w + 10, h, 5);
        let crop = |x0: usize| {
            let mut g = GrayImage::new(w, h, 0.0);
            for y in 0..h {
                for x in 0..w {
                    g.set(x, y, big.get(x + x0, y));
                }
            }
            g
        };
        let (a, b) = (crop(10), crop(0));
        let p = SiftParams::default();
        let ka = extract_features(&a, &p).unwrap();
        let kb = extract_features(&b, &p).unwrap();
        // Keypoints of `a` well inside the shared region.
        let interior: Vec<&Keypoint> = ka
            .iter()
            .filter(|k| k.pixel.x > 20.0 && k.pixel.x < w as f64 - 30.0 && k.pixel.y > 20.0 && k.pixel.y < h as f64 - 20.0)
            .collect();
        let qa: Vec<Descriptor> = interior.iter().map(|k| k.descriptor).collect();
        let tb: Vec<Descriptor> = kb.iter().map(|k| k.descriptor).collect();
        let m = match_features(&qa, &tb, 0.8);
        let correct = m
            .iter()
            .filter(|(q, t)| (interior[*q].pixel + Vector2::new(10.0, 0.0) - kb[*t].pixel).norm() < 1.5)
            .count();
        assert!(interior.len() > 20);
        let frac = correct as f64 / interior.len() as f64;
        assert!(frac >= 0.8, "{correct} of {}", interior.len());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let kps = extract_features(&blob_image(96, 96, 2), &SiftParams::default()).unwrap();
        let p = feature_path(dir.path(), 7);
        write_features(&p, &kps).unwrap();
        let back = FeatureFiles {
            dir: dir.path().to_path_buf(),
        }
        .features(7, &GrayImage::new(1, 1, 0.0))
        .unwrap();
        assert_eq!(back.len(), kps.len());
        for (a, b) in back.iter().zip(&kps) {
            assert_eq!(a.pixel, b.pixel);
            assert_eq!(a.descriptor, b.descriptor);
        }
        std::fs::write(&p, [1u8, 0, 0, 0, 9]).unwrap();
        assert!(read_features(&p).is_err());
    }
}

//! Analytic scenes: spheres, axis-aligned boxes and parallelogram patches,
//! with logo decals painted onto their surfaces.

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::Deserialize;

use super::texture::logo_texture;
use super::SynthError;
use crate::geometry::{Intrinsics, Pose6D};
use crate::raster::{ColorImage, DepthImage, GrayImage};
use crate::surface::TriangleMesh;

/// Points closer than this to a decal plane carry the decal.
const DECAL_TOLERANCE: f64 = 1e-6;
const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

fn default_max_range() -> f64 {
    10.0
}

fn default_tint() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereSpec {
    pub center: [f64; 3],
    pub radius: f64,
    #[serde(default = "default_tint")]
    pub tint: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    #[serde(default = "default_tint")]
    pub tint: [f64; 3],
}

/// Parallelogram `c0, c1, c2, c3` with `c0 + c2 = c1 + c3`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub corners: [[f64; 3]; 4],
    #[serde(default = "default_tint")]
    pub tint: [f64; 3],
}

/// A logo decal. Texture pixel `(0, 0)` sits on `corners[0]`, `(w-1, 0)` on
/// `corners[1]`, `(w-1, h-1)` on `corners[2]` and `(0, h-1)` on
/// `corners[3]`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogoSpec {
    pub id: u32,
    pub seed: u64,
    pub corners: [[f64; 3]; 4],
    /// Texture size in pixels, `[width, height]`.
    pub texture: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub bounds: Bounds,
    #[serde(default = "default_max_range")]
    pub max_range: f64,
    #[serde(default)]
    pub texture_seed: u64,
    #[serde(default, rename = "sphere")]
    pub spheres: Vec<SphereSpec>,
    #[serde(default, rename = "box")]
    pub boxes: Vec<BoxSpec>,
    #[serde(default, rename = "patch")]
    pub patches: Vec<PatchSpec>,
    #[serde(default, rename = "logo")]
    pub logos: Vec<LogoSpec>,
}

impl SceneSpec {
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Spec(e.to_string()))
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

#[derive(Debug, Clone)]
enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    Box { min: Vector3<f64>, max: Vector3<f64> },
    Patch { origin: Vector3<f64>, e1: Vector3<f64>, e2: Vector3<f64>, normal: Vector3<f64> },
}

#[derive(Debug, Clone)]
struct Primitive {
    shape: Shape,
    tint: [f64; 3],
}

/// Validated logo decal with its texture.
#[derive(Debug, Clone)]
pub struct Logo {
    pub id: u32,
    pub corners: [Vector3<f64>; 4],
    /// Unit normal pointing out of the surface carrying the decal.
    pub normal: Vector3<f64>,
    pub texture: GrayImage,
}

impl Logo {
    /// Texture boundary `[x0, y0, x1, y1]` matching the corners.
    pub fn boundary(&self) -> [f64; 4] {
        [0.0, 0.0, (self.texture.width - 1) as f64, (self.texture.height - 1) as f64]
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.corners[0] + self.corners[2]) * 0.5
    }

    /// Decal coordinates `(u, v)` of a point on the decal plane, both in
    /// `[0, 1]` inside the decal.
    pub fn uv(&self, p: &Vector3<f64>) -> (f64, f64) {
        let e1 = self.corners[1] - self.corners[0];
        let e2 = self.corners[3] - self.corners[0];
        let d = p - self.corners[0];
        solve_uv(&e1, &e2, &d)
    }

    pub fn plane_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.corners[0]).dot(&self.normal)
    }
}

fn solve_uv(e1: &Vector3<f64>, e2: &Vector3<f64>, d: &Vector3<f64>) -> (f64, f64) {
    let (a, b, c) = (e1.dot(e1), e1.dot(e2), e2.dot(e2));
    let (p, q) = (d.dot(e1), d.dot(e2));
    let det = a * c - b * b;
    ((c * p - b * q) / det, (a * q - b * p) / det)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    /// Ray parameter; camera depth when the direction has unit z in the
    /// camera frame.
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

/// A validated scene ready for rendering.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    primitives: Vec<Primitive>,
    pub logos: Vec<Logo>,
}

fn parallelogram(corners: &[[f64; 3]; 4], what: &str) -> Result<[Vector3<f64>; 4], SynthError> {
    let c = corners.map(v3);
    let e1 = c[1] - c[0];
    let e2 = c[3] - c[0];
    let scale = e1.norm().max(e2.norm());
    if (c[0] + c[2] - c[1] - c[3]).norm() > 1e-9 * scale.max(1.0) {
        return Err(SynthError::Spec(format!("{what}: corners are not a parallelogram")));
    }
    if e1.cross(&e2).norm() <= 1e-12 * scale * scale {
        return Err(SynthError::Spec(format!("{what}: degenerate corners")));
    }
    Ok(c)
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self, SynthError> {
        let (lo, hi) = (v3(spec.bounds.min), v3(spec.bounds.max));
        if (0..3).any(|i| !(lo[i] < hi[i])) {
            return Err(SynthError::Spec("bounds: min must be below max".into()));
        }
        if !(spec.max_range > 0.0) {
            return Err(SynthError::Spec("max_range must be positive".into()));
        }
        let within = |p: &Vector3<f64>| (0..3).all(|i| p[i] >= lo[i] - 1e-12 && p[i] <= hi[i] + 1e-12);
        let mut primitives = Vec::new();
        for (i, s) in spec.spheres.iter().enumerate() {
            let center = v3(s.center);
            let r = Vector3::repeat(s.radius);
            if !(s.radius > 0.0) || !within(&(center - r)) || !within(&(center + r)) {
                return Err(SynthError::Spec(format!("sphere {i}: bad radius or outside bounds")));
            }
            primitives.push(Primitive {
                shape: Shape::Sphere { center, radius: s.radius },
                tint: s.tint,
            });
        }
        for (i, b) in spec.boxes.iter().enumerate() {
            let (c, h) = (v3(b.center), v3(b.half_extents));
            if h.iter().any(|x| !(*x > 0.0)) || !within(&(c - h)) || !within(&(c + h)) {
                return Err(SynthError::Spec(format!("box {i}: bad extents or outside bounds")));
            }
            primitives.push(Primitive {
                shape: Shape::Box { min: c - h, max: c + h },
                tint: b.tint,
            });
        }
        for (i, p) in spec.patches.iter().enumerate() {
            let c = parallelogram(&p.corners, &format!("patch {i}"))?;
            if !c.iter().all(within) {
                return Err(SynthError::Spec(format!("patch {i}: outside bounds")));
            }
            let (e1, e2) = (c[1] - c[0], c[3] - c[0]);
            primitives.push(Primitive {
                shape: Shape::Patch {
                    origin: c[0],
                    e1,
                    e2,
                    normal: e1.cross(&e2).normalize(),
                },
                tint: p.tint,
            });
        }
        let mut scene = Scene {
            spec: spec.clone(),
            primitives,
            logos: Vec::new(),
        };
        let mut ids = BTreeSet::new();
        for l in &spec.logos {
            if !ids.insert(l.id) {
                return Err(SynthError::Spec(format!("logo {}: duplicate id", l.id)));
            }
            let corners = parallelogram(&l.corners, &format!("logo {}", l.id))?;
            if !corners.iter().all(within) {
                return Err(SynthError::Spec(format!("logo {}: outside bounds", l.id)));
            }
            if l.texture[0] < 16 || l.texture[1] < 16 {
                return Err(SynthError::Spec(format!("logo {}: texture below 16 px", l.id)));
            }
            let mut normal = (corners[1] - corners[0]).cross(&(corners[3] - corners[0])).normalize();
            let center = (corners[0] + corners[2]) * 0.5;
            if scene.is_inside(&(center + normal * 1e-4)) {
                normal = -normal;
            }
            scene.logos.push(Logo {
                id: l.id,
                corners,
                normal,
                texture: logo_texture(l.seed, l.texture[0], l.texture[1]),
            });
        }
        Ok(scene)
    }

    pub fn parse(text: &str) -> Result<Self, SynthError> {
        Self::new(SceneSpec::parse(text)?)
    }

    pub fn logo(&self, id: u32) -> Option<&Logo> {
        self.logos.iter().find(|l| l.id == id)
    }

    /// True when `p` lies strictly inside a sphere or box.
    pub fn is_inside(&self, p: &Vector3<f64>) -> bool {
        self.primitives.iter().any(|prim| match &prim.shape {
            Shape::Sphere { center, radius } => (p - center).norm() < *radius,
            Shape::Box { min, max } => (0..3).all(|i| p[i] > min[i] && p[i] < max[i]),
            Shape::Patch { .. } => false,
        })
    }

    /// Nearest intersection with `t > 0` along `origin + t·dir`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<SurfaceHit> {
        let mut best: Option<SurfaceHit> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = intersect_shape(&prim.shape, origin, dir) {
                if best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(SurfaceHit {
                        t,
                        point: origin + dir * t,
                        normal,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    /// Logo whose decal covers the surface point `p`.
    pub fn logo_at(&self, p: &Vector3<f64>) -> Option<&Logo> {
        self.logos.iter().find(|l| {
            if l.plane_distance(p).abs() > DECAL_TOLERANCE {
                return false;
            }
            let (u, v) = l.uv(p);
            (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)
        })
    }

    fn albedo(&self, hit: &SurfaceHit) -> [f64; 3] {
        if let Some(l) = self.logo_at(&hit.point) {
            let (u, v) = l.uv(&hit.point);
            let g = bilinear(&l.texture, u * (l.texture.width - 1) as f64, v * (l.texture.height - 1) as f64);
            return [g; 3];
        }
        let n = solid_noise(&hit.point, self.spec.texture_seed);
        self.primitives[hit.primitive].tint.map(|c| c * n)
    }

    fn check_camera(&self, pose: &Pose6D) -> Result<(), SynthError> {
        let c = pose.camera_center();
        if self.is_inside(&c) {
            return Err(SynthError::CameraInsideGeometry([c.x, c.y, c.z]));
        }
        Ok(())
    }

    /// Camera-frame depth of the nearest surface per pixel, 0 for no hit
    /// within `max_range`.
    pub fn render_depth(&self, pose: &Pose6D, k: &Intrinsics) -> Result<DepthImage, SynthError> {
        self.check_camera(pose)?;
        let (w, h) = (k.width as usize, k.height as usize);
        let origin = pose.camera_center();
        let rt = pose.rotation.transpose();
        let mut img = DepthImage::new(w, h);
        img.data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, d) in row.iter_mut().enumerate() {
                let dir = rt * k.unproject(&Vector2::new(x as f64, y as f64));
                *d = match self.intersect(&origin, &dir) {
                    Some(hit) if hit.t <= self.spec.max_range => hit.t,
                    _ => 0.0,
                };
            }
        });
        Ok(img)
    }

    /// Unlit albedo image averaging `n × n` samples per pixel.
    pub fn render_color(&self, pose: &Pose6D, k: &Intrinsics, n: usize) -> Result<ColorImage, SynthError> {
        self.check_camera(pose)?;
        let (w, h) = (k.width as usize, k.height as usize);
        let origin = pose.camera_center();
        let rt = pose.rotation.transpose();
        let mut img = ColorImage::new(w, h, BACKGROUND);
        let n = n.max(1);
        let offsets: Vec<(f64, f64)> = (0..n * n)
            .map(|i| (((i % n) as f64 + 0.5) / n as f64 - 0.5, ((i / n) as f64 + 0.5) / n as f64 - 0.5))
            .collect();
        let weight = 1.0 / offsets.len() as f64;
        img.data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, px) in row.iter_mut().enumerate() {
                let mut acc = [0.0f64; 3];
                for &(dx, dy) in &offsets {
                    let dir = rt * k.unproject(&Vector2::new(x as f64 + dx, y as f64 + dy));
                    let c = match self.intersect(&origin, &dir) {
                        Some(hit) if hit.t <= self.spec.max_range => self.albedo(&hit),
                        _ => BACKGROUND.map(f64::from),
                    };
                    (0..3).for_each(|i| acc[i] += c[i] * weight);
                }
                *px = acc.map(|c| c.clamp(0.0, 1.0) as f32);
            }
        });
        Ok(img)
    }

    /// True when the segment from the camera to `p` reaches `p` without
    /// passing through another surface first.
    pub fn is_visible(&self, pose: &Pose6D, p: &Vector3<f64>) -> bool {
        let origin = pose.camera_center();
        let dir = p - origin;
        match self.intersect(&origin, &dir) {
            Some(hit) => hit.t >= 1.0 - 1e-9,
            None => true,
        }
    }

    /// Image polygon of a logo when it faces the camera, all corners lie
    /// inside the image and the center and corners are unoccluded.
    pub fn logo_polygon(&self, id: u32, pose: &Pose6D, k: &Intrinsics) -> Option<[Vector2<f64>; 4]> {
        let logo = self.logo(id)?;
        let center = logo.center();
        if logo.normal.dot(&(pose.camera_center() - center)) <= 0.0 {
            return None;
        }
        let mut out = [Vector2::zeros(); 4];
        for (o, c) in out.iter_mut().zip(&logo.corners) {
            let pc = pose.transform(c);
            if pc.z <= 0.0 {
                return None;
            }
            *o = k.project_camera(&pc);
            if !k.contains(o) {
                return None;
            }
        }
        // Pull the probes slightly inside so the box edge itself does not
        // count as an occluder.
        let probes = logo.corners.map(|c| c + (center - c) * 1e-6);
        if !self.is_visible(pose, &center) || !probes.iter().all(|p| self.is_visible(pose, p)) {
            return None;
        }
        Some(out)
    }

    /// Analytic ROI of a logo on a mesh: triangles facing along the logo
    /// normal whose centroid lies within `tolerance` of the decal plane and
    /// inside the decal.
    pub fn logo_triangles(&self, id: u32, mesh: &TriangleMesh, tolerance: f64) -> BTreeSet<usize> {
        let Some(logo) = self.logo(id) else {
            return BTreeSet::new();
        };
        (0..mesh.triangles.len())
            .filter(|&t| {
                let c = mesh.centroid(t);
                if logo.plane_distance(&c).abs() > tolerance || mesh.normal(t).dot(&logo.normal) <= 0.5 {
                    return false;
                }
                let (u, v) = logo.uv(&c);
                (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)
            })
            .collect()
    }
}

fn intersect_shape(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = o - center;
            let a = d.dot(d);
            let b = oc.dot(d);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            // Stable root pair.
            let q = -(b + b.signum() * sq);
            let (mut t0, mut t1) = (q / a, if q != 0.0 { c / q } else { 0.0 });
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            let t = if t0 > 0.0 { t0 } else if t1 > 0.0 { t1 } else { return None };
            let p = o + d * t;
            Some((t, (p - center) / *radius))
        }
        Shape::Box { min, max } => {
            let (mut tn, mut tf) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut an, mut af) = (0usize, 0usize);
            for i in 0..3 {
                if d[i] == 0.0 {
                    if o[i] < min[i] || o[i] > max[i] {
                        return None;
                    }
                    continue;
                }
                let (mut a, mut b) = ((min[i] - o[i]) / d[i], (max[i] - o[i]) / d[i]);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                if a > tn {
                    tn = a;
                    an = i;
                }
                if b < tf {
                    tf = b;
                    af = i;
                }
            }
            if tn > tf || tf <= 0.0 {
                return None;
            }
            let (t, axis) = if tn > 0.0 { (tn, an) } else { (tf, af) };
            let mut n = Vector3::zeros();
            n[axis] = if tn > 0.0 { -d[axis].signum() } else { d[axis].signum() };
            Some((t, n))
        }
        Shape::Patch { origin, e1, e2, normal } => {
            let denom = normal.dot(d);
            if denom == 0.0 {
                return None;
            }
            let t = normal.dot(&(origin - o)) / denom;
            if t <= 0.0 {
                return None;
            }
            let (u, v) = solve_uv(e1, e2, &(o + d * t - origin));
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                return None;
            }
            Some((t, if denom < 0.0 { *normal } else { -normal }))
        }
    }
}

fn bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let g = |xi: f64, yi: f64| img.get_clamped(xi as isize, yi as isize) as f64;
    let top = g(x0, y0) * (1.0 - fx) + g(x0 + 1.0, y0) * fx;
    let bottom = g(x0, y0 + 1.0) * (1.0 - fx) + g(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: &Vector3<f64>, cell: f64, seed: u64) -> f64 {
    let q = p / cell;
    let f = q.map(f64::floor);
    let s = (q - f).map(|t| t * t * (3.0 - 2.0 * t));
    let (ix, iy, iz) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let w = (if dx == 1 { s.x } else { 1.0 - s.x })
            * (if dy == 1 { s.y } else { 1.0 - s.y })
            * (if dz == 1 { s.z } else { 1.0 - s.z });
        acc += w * hash3(ix + dx, iy + dy, iz + dz, seed);
    }
    acc
}

/// Two-octave solid texture in `[0.05, 0.95]`.
pub fn solid_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let n = 0.6 * value_noise(p, 0.06, seed) + 0.4 * value_noise(p, 0.025, seed.wrapping_add(1));
    (0.5 + 2.0 * (n - 0.5)).clamp(0.05, 0.95)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> Intrinsics {
        Intrinsics::new(200.0, 200.0, 79.5, 59.5, 160, 120).unwrap()
    }

    const SPHERE: &str = r#"
bounds = { min = [-2, -2, -2], max = [2, 2, 2] }
[[sphere]]
center = [0.1, -0.2, 0.3]
radius = 0.6
"#;

    #[test]
    fn plane_depth_is_exact() {
        let scene = Scene::parse(
            r#"
bounds = { min = [-50, -50, -1], max = [50, 50, 1] }
[[patch]]
corners = [[-50, -50, 0], [50, -50, 0], [50, 50, 0], [-50, 50, 0]]
"#,
        )
        .unwrap();
        let pose = Pose6D::look_at(Vector3::new(0.3, -0.4, 2.0), Vector3::new(0.5, 0.2, 0.0), Vector3::y());
        let k = camera();
        let depth = scene.render_depth(&pose, &k).unwrap();
        assert_eq!(depth.valid_count(), 160 * 120);
        for y in 0..120 {
            for x in 0..160 {
                let p = crate::geometry::backproject(&Vector2::new(x as f64, y as f64), depth.get(x, y), &pose, &k).unwrap();
                assert!(p.z.abs() < 1e-9, "{p}");
            }
        }
    }

    #[test]
    fn sphere_depth_residual() {
        let scene = Scene::parse(SPHERE).unwrap();
        let k = camera();
        let center = Vector3::new(0.1, -0.2, 0.3);
        for eye in [Vector3::new(0.0, -2.5, 0.4), Vector3::new(1.5, 1.2, -0.8)] {
            let pose = Pose6D::look_at(eye, center, Vector3::z());
            let depth = scene.render_depth(&pose, &k).unwrap();
            assert!(depth.valid_count() > 1000);
            for y in 0..120 {
                for x in 0..160 {
                    let d = depth.get(x, y);
                    if d > 0.0 {
                        let p = crate::geometry::backproject(&Vector2::new(x as f64, y as f64), d, &pose, &k).unwrap();
                        assert!(((p - center).norm() - 0.6).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_scene_and_inside_camera() {
        let scene = Scene::parse("bounds = { min = [0, 0, 0], max = [1, 1, 1] }").unwrap();
        let pose = Pose6D::identity();
        assert_eq!(scene.render_depth(&pose, &camera()).unwrap().valid_count(), 0);
        let sphere = Scene::parse(SPHERE).unwrap();
        let inside = Pose6D::look_at(Vector3::new(0.1, -0.2, 0.4), Vector3::zeros(), Vector3::z());
        assert!(matches!(
            sphere.render_depth(&inside, &camera()),
            Err(SynthError::CameraInsideGeometry(_))
        ));
    }

    #[test]
    fn box_faces_and_normals() {
        let scene = Scene::parse(
            r#"
bounds = { min = [-1, -1, -1], max = [1, 1, 1] }
[[box]]
center = [0, 0, 0]
half_extents = [0.2, 0.3, 0.4]
"#,
        )
        .unwrap();
        let hit = scene.intersect(&Vector3::new(0.05, -2.0, 0.1), &Vector3::y()).unwrap();
        assert!((hit.t - 1.7).abs() < 1e-12);
        assert_eq!(hit.normal, -Vector3::y());
        let hit = scene.intersect(&Vector3::new(0.0, 0.0, 3.0), &Vector3::new(0.0, 0.0, -2.0)).unwrap();
        assert!((hit.t - 1.3).abs() < 1e-12);
        assert_eq!(hit.normal, Vector3::z());
        assert!(scene.intersect(&Vector3::new(0.5, -2.0, 0.0), &Vector3::y()).is_none());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(Scene::parse("bounds = { min = [0, 0, 0], max = [1, 1, 1] }\nfoo = 1").is_err());
        let out = "bounds = { min = [0, 0, 0], max = [1, 1, 1] }\n[[sphere]]\ncenter = [0.5, 0.5, 0.5]\nradius = 0.7";
        assert!(Scene::parse(out).is_err());
        let skew = "bounds = { min = [0, 0, 0], max = [1, 1, 1] }\n[[patch]]\ncorners = [[0,0,0],[1,0,0],[1,1,0],[0,0.5,0]]";
        assert!(Scene::parse(skew).is_err());
    }

    #[test]
    fn logo_decal_polygon_and_normal() {
        let scene = Scene::parse(
            r#"
bounds = { min = [-1, -1, -1], max = [1, 1, 1] }
[[box]]
center = [0, 0.3, 0]
half_extents = [0.5, 0.3, 0.5]
[[logo]]
id = 4
seed = 1
corners = [[-0.2, 0, 0.15], [0.2, 0, 0.15], [0.2, 0, -0.15], [-0.2, 0, -0.15]]
texture = [80, 60]
"#,
        )
        .unwrap();
        let logo = scene.logo(4).unwrap();
        assert_eq!(logo.normal, -Vector3::y());
        let k = camera();
        let pose = Pose6D::look_at(Vector3::new(0.0, -1.5, 0.0), Vector3::zeros(), Vector3::z());
        let poly = scene.logo_polygon(4, &pose, &k).unwrap();
        // Upright logo: first corner is the top-left of the image.
        assert!(poly[0].x < poly[1].x && poly[0].y < poly[3].y);
        assert!((poly[0].x - (79.5 - 200.0 * 0.2 / 1.5)).abs() < 1e-9);
        let behind = Pose6D::look_at(Vector3::new(0.0, 1.5, 0.0), Vector3::zeros(), Vector3::z());
        assert!(scene.logo_polygon(4, &behind, &k).is_none());
        let hit = scene.intersect(&Vector3::new(0.0, -1.0, 0.0), &Vector3::y()).unwrap();
        assert_eq!(scene.logo_at(&hit.point).map(|l| l.id), Some(4));
        let img = scene.render_color(&pose, &k, 2).unwrap();
        assert!(img.data.iter().any(|c| c[0] < 0.2) && img.data.iter().any(|c| c[0] > 0.8));
    }
}

//! Reference-logo detection in frames and mapping of the detected regions
//! onto mesh triangles.

pub mod homography;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{Matrix3, Vector2};
use rayon::prelude::*;
use thiserror::Error;

use crate::gaze::ObbTree;
use crate::geometry::{project, Intrinsics, Pose6D, Ray};
use crate::io::{csv_rows, read_text, write_text, FormatError};
use crate::polygon::{self, Polygon};
use crate::raster::GrayImage;
use crate::slam::{match_features, Descriptor, Keypoint, SiftParams, SlamError};
use crate::surface::TriangleMesh;
pub use homography::HomographyParams;

pub const MIN_LOGO_FEATURES: usize = 8;

#[derive(Debug, Error)]
pub enum RoiError {
    #[error("invalid logo {id}: {reason}")]
    InvalidLogo { id: u32, reason: String },
    #[error("no detection has a localized pose")]
    NoLocalizedDetections,
    #[error("roi references triangle {triangle} but the mesh has {count}")]
    MeshMismatch { triangle: usize, count: usize },
    #[error(transparent)]
    Features(#[from] SlamError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLogo {
    pub id: u32,
    pub image: GrayImage,
    pub features: Vec<Keypoint>,
    /// Rectangle corners in reference-image pixels, in order
    /// (x0,y0), (x1,y0), (x1,y1), (x0,y1).
    pub boundary: [Vector2<f64>; 4],
}

pub fn rect(b: [f64; 4]) -> [Vector2<f64>; 4] {
    [
        Vector2::new(b[0], b[1]),
        Vector2::new(b[2], b[1]),
        Vector2::new(b[2], b[3]),
        Vector2::new(b[0], b[3]),
    ]
}

impl ReferenceLogo {
    /// Extracts features from `image`; `boundary` is `[x0, y0, x1, y1]`.
    pub fn new(id: u32, image: GrayImage, boundary: [f64; 4], sift: &SiftParams) -> Result<Self, RoiError> {
        let features = crate::slam::extract_features(&image, sift)?;
        Self::with_features(id, image, boundary, features)
    }

    pub fn with_features(
        id: u32,
        image: GrayImage,
        boundary: [f64; 4],
        features: Vec<Keypoint>,
    ) -> Result<Self, RoiError> {
        if features.len() < MIN_LOGO_FEATURES {
            return Err(RoiError::InvalidLogo {
                id,
                reason: format!("{} features, need {MIN_LOGO_FEATURES}", features.len()),
            });
        }
        if !(boundary[2] > boundary[0] && boundary[3] > boundary[1]) {
            return Err(RoiError::InvalidLogo {
                id,
                reason: "empty boundary".into(),
            });
        }
        Ok(Self {
            id,
            image,
            features,
            boundary: rect(boundary),
        })
    }

    pub fn boundary_rect(&self) -> [f64; 4] {
        [self.boundary[0].x, self.boundary[0].y, self.boundary[2].x, self.boundary[2].y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D {
    pub frame_id: u64,
    pub logo_id: u32,
    pub polygon: [Vector2<f64>; 4],
    /// Reference → frame.
    pub homography: Matrix3<f64>,
    pub inlier_count: usize,
}

impl Detection2D {
    /// Builds a detection from a reference boundary and a homography.
    /// `None` when the projected boundary is not a convex quadrilateral or
    /// the homography is singular.
    pub fn from_homography(
        frame_id: u64,
        logo_id: u32,
        boundary: &[Vector2<f64>; 4],
        h: Matrix3<f64>,
        inlier_count: usize,
    ) -> Option<Self> {
        let h = homography::normalized(&h);
        if h.determinant().abs() <= 1e-12 {
            return None;
        }
        let mut polygon = [Vector2::zeros(); 4];
        for (p, b) in polygon.iter_mut().zip(boundary) {
            *p = homography::apply(&h, b)?;
        }
        if !polygon::is_convex(&polygon) {
            return None;
        }
        Some(Self {
            frame_id,
            logo_id,
            polygon,
            homography: h,
            inlier_count,
        })
    }

    /// Rebuilds the homography from the polygon (four exact
    /// correspondences with the reference boundary).
    pub fn from_polygon(
        frame_id: u64,
        logo_id: u32,
        boundary: &[Vector2<f64>; 4],
        polygon: [Vector2<f64>; 4],
        inlier_count: usize,
    ) -> Option<Self> {
        let h = homography::fit(boundary, &polygon)?;
        let mut d = Self::from_homography(frame_id, logo_id, boundary, h, inlier_count)?;
        d.polygon = polygon;
        Some(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectParams {
    pub ratio: f64,
    pub min_inliers: usize,
    pub homography: HomographyParams,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            ratio: crate::slam::DEFAULT_RATIO,
            min_inliers: 8,
            homography: HomographyParams::default(),
        }
    }
}

/// Finds one occurrence of `logo` among the frame's keypoints.
pub fn detect_logo(
    frame_id: u64,
    frame: &[Keypoint],
    logo: &ReferenceLogo,
    p: &DetectParams,
) -> Option<Detection2D> {
    let q: Vec<Descriptor> = logo.features.iter().map(|k| k.descriptor).collect();
    let t: Vec<Descriptor> = frame.iter().map(|k| k.descriptor).collect();
    let m = match_features(&q, &t, p.ratio);
    if m.len() < p.min_inliers.max(4) {
        return None;
    }
    let src: Vec<Vector2<f64>> = m.iter().map(|(a, _)| logo.features[*a].pixel).collect();
    let dst: Vec<Vector2<f64>> = m.iter().map(|(_, b)| frame[*b].pixel).collect();
    let (h, mask) = homography::ransac(&src, &dst, &p.homography)?;
    let inliers = mask.iter().filter(|m| **m).count();
    if inliers < p.min_inliers {
        return None;
    }
    Detection2D::from_homography(frame_id, logo.id, &logo.boundary, h, inliers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterParams {
    /// Maximum corner displacement as a fraction of the image diagonal.
    pub max_displacement: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Detections this many frames apart or closer are neighbors.
    pub neighbor_frames: u64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            max_displacement: 0.2,
            min_scale: 0.67,
            max_scale: 1.5,
            neighbor_frames: 10,
        }
    }
}

/// Whether the transfer `T = H_b·H_a⁻¹` between two detections of the same
/// logo stays close to the identity.
pub fn consistent(a: &Detection2D, b: &Detection2D, diagonal: f64, p: &FilterParams) -> bool {
    let Some(inv) = a.homography.try_inverse() else {
        return false;
    };
    let t = b.homography * inv;
    let mut moved = [Vector2::zeros(); 4];
    for (m, c) in moved.iter_mut().zip(&a.polygon) {
        match homography::apply(&t, c) {
            Some(q) => *m = q,
            None => return false,
        }
    }
    let shift = moved
        .iter()
        .zip(&a.polygon)
        .map(|(m, c)| (m - c).norm())
        .fold(0.0, f64::max);
    let scale = (polygon::area(&moved) / polygon::area(&a.polygon)).sqrt();
    shift <= p.max_displacement * diagonal && scale >= p.min_scale && scale <= p.max_scale
}

/// Drops detections that disagree with all of their temporal neighbors of
/// the same logo. Detections without neighbors pass. Because consistency
/// is symmetric, the result is a fixed point of the filter.
pub fn filter_detections(detections: &[Detection2D], diagonal: f64, p: &FilterParams) -> Vec<Detection2D> {
    detections
        .iter()
        .enumerate()
        .filter(|(i, d)| {
            let mut neighbors = detections.iter().enumerate().filter(|(j, e)| {
                j != i && e.logo_id == d.logo_id && e.frame_id.abs_diff(d.frame_id) <= p.neighbor_frames
            });
            let mut any = false;
            let ok = neighbors.any(|(_, e)| {
                any = true;
                consistent(d, e, diagonal, p)
            });
            ok || !any
        })
        .map(|(_, d)| d.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MembershipRule {
    /// All three vertices project inside the polygon.
    AllVertices,
    Centroid,
    AnyVertex,
}

impl std::str::FromStr for MembershipRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all-vertices" => Ok(Self::AllVertices),
            "centroid" => Ok(Self::Centroid),
            "any-vertex" => Ok(Self::AnyVertex),
            _ => Err(format!("unknown membership rule {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapParams {
    pub vote_fraction: f64,
    pub rule: MembershipRule,
    /// Projected points this close to the polygon boundary count as inside.
    pub inside_tolerance_px: f64,
}

impl Default for MapParams {
    fn default() -> Self {
        Self {
            vote_fraction: 0.5,
            rule: MembershipRule::AllVertices,
            inside_tolerance_px: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roi3D {
    pub roi_id: u32,
    pub triangle_ids: BTreeSet<usize>,
    pub area: f64,
}

impl Roi3D {
    pub fn new(roi_id: u32, triangle_ids: BTreeSet<usize>, mesh: &TriangleMesh) -> Result<Self, RoiError> {
        let count = mesh.triangles.len();
        if let Some(t) = triangle_ids.iter().find(|t| **t >= count) {
            return Err(RoiError::MeshMismatch { triangle: *t, count });
        }
        let area = triangle_ids.iter().map(|t| mesh.triangle_area(*t)).sum();
        Ok(Self {
            roi_id,
            triangle_ids,
            area,
        })
    }
}

/// Front-facing, centroid inside the image and not hidden behind other
/// surfaces.
fn visible(mesh: &TriangleMesh, tree: &ObbTree, t: usize, pose: &Pose6D, k: &Intrinsics) -> bool {
    let eye = pose.camera_center();
    let c = mesh.centroid(t);
    let to_eye = eye - c;
    if mesh.normal(t).dot(&to_eye) <= 0.0 {
        return false;
    }
    if !project(&c, pose, k).is_ok_and(|px| k.contains(&px)) {
        return false;
    }
    let dist = to_eye.norm();
    let ray = Ray::new(eye, -to_eye);
    match tree.intersect(&ray) {
        Some(hit) => hit.triangle as usize == t || hit.distance >= dist * (1.0 - 1e-9) - 1e-9,
        None => true,
    }
}

fn inside_polygon(
    mesh: &TriangleMesh,
    t: usize,
    poly: &Polygon,
    pose: &Pose6D,
    k: &Intrinsics,
    p: &MapParams,
) -> bool {
    let test = |x: &nalgebra::Vector3<f64>| {
        project(x, pose, k).is_ok_and(|px| polygon::contains(poly, &px, p.inside_tolerance_px))
    };
    match p.rule {
        MembershipRule::Centroid => test(&mesh.centroid(t)),
        MembershipRule::AllVertices => mesh.corners(t).iter().all(test),
        MembershipRule::AnyVertex => mesh.corners(t).iter().any(test),
    }
}

/// Maps the detections of one logo onto the mesh. Detections whose frame
/// has no pose are skipped. A triangle belongs to the result when it is a
/// member in at least `vote_fraction` of the detection frames that see it.
pub fn map_roi_3d(
    roi_id: u32,
    detections: &[Detection2D],
    poses: &BTreeMap<u64, Pose6D>,
    k: &Intrinsics,
    mesh: &TriangleMesh,
    tree: &ObbTree,
    p: &MapParams,
) -> Result<Roi3D, RoiError> {
    let frames: Vec<(Polygon, Pose6D)> = detections
        .iter()
        .filter_map(|d| poses.get(&d.frame_id).map(|pose| (d.polygon.to_vec(), *pose)))
        .collect();
    if frames.is_empty() {
        return Err(RoiError::NoLocalizedDetections);
    }
    let n = mesh.triangles.len();
    // Candidates: members of at least one frame.
    let candidates: Vec<usize> = (0..n)
        .into_par_iter()
        .filter(|t| {
            frames
                .iter()
                .any(|(poly, pose)| inside_polygon(mesh, *t, poly, pose, k, p) && visible(mesh, tree, *t, pose, k))
        })
        .collect();
    let members: BTreeSet<usize> = candidates
        .into_par_iter()
        .filter(|t| {
            let (mut seen, mut votes) = (0usize, 0usize);
            for (poly, pose) in &frames {
                if visible(mesh, tree, *t, pose, k) {
                    seen += 1;
                    if inside_polygon(mesh, *t, poly, pose, k, p) {
                        votes += 1;
                    }
                }
            }
            votes > 0 && votes as f64 >= p.vote_fraction * seen as f64
        })
        .collect();
    Roi3D::new(roi_id, members, mesh)
}

/// Writes `logos.csv` and one PNG per logo into `dir`.
pub fn save_logos(dir: &Path, logos: &[ReferenceLogo]) -> Result<(), FormatError> {
    let mut csv = String::from("id,filename,x0,y0,x1,y1\n");
    for l in logos {
        let name = format!("logo_{}.png", l.id);
        l.image.save_png(&dir.join(&name))?;
        let b = l.boundary_rect();
        csv.push_str(&format!("{},{name},{},{},{},{}\n", l.id, b[0], b[1], b[2], b[3]));
    }
    write_text(&dir.join("logos.csv"), &csv)
}

pub fn load_logos(dir: &Path, sift: &SiftParams) -> Result<Vec<ReferenceLogo>, RoiError> {
    let path = dir.join("logos.csv");
    let text = read_text(&path)?;
    let mut out = Vec::new();
    for row in csv_rows(&path, &text) {
        row.expect_len(6)?;
        let id: u32 = row.get(0)?;
        let name: String = row.get(1)?;
        let image = GrayImage::load_png(&dir.join(name))?;
        let b = [row.get(2)?, row.get(3)?, row.get(4)?, row.get(5)?];
        out.push(ReferenceLogo::new(id, image, b, sift)?);
    }
    Ok(out)
}

pub fn write_detections(path: &Path, detections: &[Detection2D]) -> Result<(), FormatError> {
    let mut s = String::from("frame_id,logo_id,x0,y0,x1,y1,x2,y2,x3,y3,inliers\n");
    for d in detections {
        s.push_str(&format!("{},{}", d.frame_id, d.logo_id));
        for p in &d.polygon {
            s.push_str(&format!(",{},{}", p.x, p.y));
        }
        s.push_str(&format!(",{}\n", d.inlier_count));
    }
    write_text(path, &s)
}

/// Reads detections; homographies are rebuilt from the polygons and the
/// logo boundaries (`logo id → [x0, y0, x1, y1]`).
pub fn read_detections(path: &Path, boundaries: &BTreeMap<u32, [f64; 4]>) -> Result<Vec<Detection2D>, FormatError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for row in csv_rows(path, &text) {
        row.expect_len(11)?;
        let frame_id: u64 = row.get(0)?;
        let logo_id: u32 = row.get(1)?;
        let mut poly = [Vector2::zeros(); 4];
        for (i, p) in poly.iter_mut().enumerate() {
            *p = Vector2::new(row.get(2 + 2 * i)?, row.get(3 + 2 * i)?);
        }
        let b = boundaries
            .get(&logo_id)
            .ok_or_else(|| FormatError::parse(path, row.line, format!("unknown logo {logo_id}")))?;
        let d = Detection2D::from_polygon(frame_id, logo_id, &rect(*b), poly, row.get(10)?)
            .ok_or_else(|| FormatError::parse(path, row.line, "polygon is not a convex quadrilateral"))?;
        out.push(d);
    }
    Ok(out)
}

pub fn write_rois(path: &Path, rois: &[Roi3D]) -> Result<(), FormatError> {
    let mut s = String::from("roi_id,triangle_id\n");
    for r in rois {
        for t in &r.triangle_ids {
            s.push_str(&format!("{},{t}\n", r.roi_id));
        }
    }
    write_text(path, &s)
}

/// Reads ROIs in id order. ROIs with no rows are absent.
pub fn read_rois(path: &Path, mesh: &TriangleMesh) -> Result<Vec<Roi3D>, RoiError> {
    let text = read_text(path)?;
    let mut sets: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for row in csv_rows(path, &text) {
        row.expect_len(2)?;
        sets.entry(row.get(0)?).or_default().insert(row.get(1)?);
    }
    sets.into_iter().map(|(id, s)| Roi3D::new(id, s, mesh)).collect()
}

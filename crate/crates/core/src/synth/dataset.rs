//! Writes a rendered session to disk in the formats the pipeline reads.
//!
//! ```text
//! scene.toml, session.toml      copies of the specs
//! logos/                        logos.csv + logo_<id>.png
//! scan/                         intrinsics.txt, frames.csv, anchor_pose.csv,
//!                               color/<id>.png, depth/<id>.png (16-bit mm)
//! etg/                          intrinsics.txt, frames.csv, color/<id>.png
//! gaze.csv                      eye-tracker gaze samples
//! gt/                           scan_poses.csv, etg_poses.csv, fixations.csv,
//!                               polygons.csv, etg_blurred.csv
//! ```

use std::path::{Path, PathBuf};

use super::{simulate_gaze_session, Scene, SessionSpec, SynthError};
use crate::gaze::io::write_gaze;
use crate::geometry::Pose6D;
use crate::io::{csv_rows, read_text, write_intrinsics, write_poses, write_text, FormatError};
use crate::raster::{ColorImage, GrayImage};
use crate::roi::{rect, save_logos, write_detections, Detection2D, ReferenceLogo};
use crate::slam::SiftParams;

/// Paths inside a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.toml")
    }
    pub fn session(&self) -> PathBuf {
        self.root.join("session.toml")
    }
    pub fn logos(&self) -> PathBuf {
        self.root.join("logos")
    }
    pub fn scan_intrinsics(&self) -> PathBuf {
        self.root.join("scan/intrinsics.txt")
    }
    pub fn scan_frames(&self) -> PathBuf {
        self.root.join("scan/frames.csv")
    }
    /// Pose of the first scan frame; it fixes the map's world frame.
    pub fn scan_anchor(&self) -> PathBuf {
        self.root.join("scan/anchor_pose.csv")
    }
    pub fn scan_color(&self, id: u64) -> PathBuf {
        self.root.join(format!("scan/color/{id:06}.png"))
    }
    pub fn scan_depth(&self, id: u64) -> PathBuf {
        self.root.join(format!("scan/depth/{id:06}.png"))
    }
    pub fn etg_intrinsics(&self) -> PathBuf {
        self.root.join("etg/intrinsics.txt")
    }
    pub fn etg_frames(&self) -> PathBuf {
        self.root.join("etg/frames.csv")
    }
    pub fn etg_color(&self, id: u64) -> PathBuf {
        self.root.join(format!("etg/color/{id:06}.png"))
    }
    pub fn gaze(&self) -> PathBuf {
        self.root.join("gaze.csv")
    }
    pub fn gt_scan_poses(&self) -> PathBuf {
        self.root.join("gt/scan_poses.csv")
    }
    pub fn gt_etg_poses(&self) -> PathBuf {
        self.root.join("gt/etg_poses.csv")
    }
    pub fn gt_fixations(&self) -> PathBuf {
        self.root.join("gt/fixations.csv")
    }
    pub fn gt_polygons(&self) -> PathBuf {
        self.root.join("gt/polygons.csv")
    }
    pub fn gt_blurred(&self) -> PathBuf {
        self.root.join("gt/etg_blurred.csv")
    }
}

pub const FRAMES_HEADER: &str = "frame_id,timestamp_s";

pub fn write_frames(path: &Path, times: &[f64]) -> Result<(), FormatError> {
    let mut s = format!("{FRAMES_HEADER}\n");
    for (i, t) in times.iter().enumerate() {
        s.push_str(&format!("{i},{t}\n"));
    }
    write_text(path, &s)
}

pub fn read_frames(path: &Path) -> Result<Vec<(u64, f64)>, FormatError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for row in csv_rows(path, &text) {
        row.expect_len(2)?;
        out.push((row.get(0)?, row.get(1)?));
    }
    Ok(out)
}

/// Ground-truth fixation per gaze sample; empty cells where there is none.
pub fn write_fixations(path: &Path, truth: &[super::GazeTruth]) -> Result<(), FormatError> {
    let mut s = String::from("timestamp_s,x,y,z,logo_id\n");
    for g in truth {
        match g.fixation {
            Some(p) => s.push_str(&format!("{},{},{},{}", g.timestamp, p.x, p.y, p.z)),
            None => s.push_str(&format!("{},,,", g.timestamp)),
        }
        match g.logo {
            Some(id) => s.push_str(&format!(",{id}\n")),
            None => s.push_str(",\n"),
        }
    }
    write_text(path, &s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixationRecord {
    pub timestamp: f64,
    pub point: Option<nalgebra::Vector3<f64>>,
    pub logo: Option<u32>,
}

pub fn read_fixations(path: &Path) -> Result<Vec<FixationRecord>, FormatError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for row in csv_rows(path, &text) {
        row.expect_len(5)?;
        let point = if row.cells[1].is_empty() {
            None
        } else {
            Some(nalgebra::Vector3::new(row.get(1)?, row.get(2)?, row.get(3)?))
        };
        let logo = if row.cells[4].is_empty() { None } else { Some(row.get(4)?) };
        out.push(FixationRecord {
            timestamp: row.get(0)?,
            point,
            logo,
        });
    }
    Ok(out)
}

pub fn blur_color(img: &ColorImage, sigma: f32) -> ColorImage {
    let mut out = img.clone();
    for c in 0..3 {
        let channel = GrayImage {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|p| p[c]).collect(),
        }
        .gaussian_blur(sigma);
        out.data.iter_mut().zip(channel.data).for_each(|(p, v)| p[c] = v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSummary {
    pub scan_frames: usize,
    pub etg_frames: usize,
    pub gaze_samples: usize,
    pub valid_gaze: usize,
    pub gt_polygons: usize,
    pub blurred_frames: usize,
}

/// Renders everything described by the two spec texts into `root`.
pub fn generate(scene_text: &str, session_text: &str, seed: u64, root: &Path) -> Result<DatasetSummary, SynthError> {
    let scene = Scene::parse(scene_text)?;
    let session = SessionSpec::parse(session_text)?;
    let scan = session
        .scan
        .as_ref()
        .ok_or_else(|| SynthError::Spec("session has no [scan] trajectory".into()))?;
    let ds = Dataset::new(root);
    write_text(&ds.scene(), scene_text)?;
    write_text(&ds.session(), session_text)?;

    let sift = SiftParams::default();
    let logos = scene
        .logos
        .iter()
        .map(|l| ReferenceLogo::new(l.id, l.texture.clone(), l.boundary(), &sift))
        .collect::<Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(ds.logos()).map_err(|e| FormatError::io(&ds.logos(), e))?;
    save_logos(&ds.logos(), &logos)?;

    let k = scan.intrinsics().map_err(|e| SynthError::Spec(e.to_string()))?;
    write_intrinsics(&ds.scan_intrinsics(), &k)?;
    let times = scan.frame_times();
    write_frames(&ds.scan_frames(), &times)?;
    let mut poses: Vec<(u64, Pose6D)> = Vec::new();
    let mut polygons = Vec::new();
    for (i, t) in times.iter().enumerate() {
        let id = i as u64;
        let pose = scan.pose_at(*t);
        scene.render_color(&pose, &k, scan.supersample)?.save_png(&ds.scan_color(id))?;
        scene.render_depth(&pose, &k)?.save_png(&ds.scan_depth(id))?;
        for l in &scene.logos {
            if let Some(poly) = scene.logo_polygon(l.id, &pose, &k) {
                if let Some(d) = Detection2D::from_polygon(id, l.id, &rect(l.boundary()), poly, 0) {
                    polygons.push(d);
                }
            }
        }
        poses.push((id, pose));
    }
    write_poses(&ds.scan_anchor(), &poses[..1.min(poses.len())])?;
    write_poses(&ds.gt_scan_poses(), &poses)?;
    write_detections(&ds.gt_polygons(), &polygons)?;

    let sim = simulate_gaze_session(&scene, &session, seed)?;
    let etg = &session.eye_tracker;
    let ke = etg.intrinsics().map_err(|e| SynthError::Spec(e.to_string()))?;
    write_intrinsics(&ds.etg_intrinsics(), &ke)?;
    let etg_times: Vec<f64> = sim.samples.iter().map(|s| s.timestamp).collect();
    write_frames(&ds.etg_frames(), &etg_times)?;
    let mut blurred = String::from("frame_id,sigma_px\n");
    let mut blurred_frames = 0;
    for (i, (t, pose)) in etg_times.iter().zip(&sim.poses).enumerate() {
        let mut img = scene.render_color(pose, &ke, etg.supersample)?;
        if let Some(sigma) = session.blur_at(*t) {
            img = blur_color(&img, sigma as f32);
            blurred.push_str(&format!("{i},{sigma}\n"));
            blurred_frames += 1;
        }
        img.save_png(&ds.etg_color(i as u64))?;
    }
    write_text(&ds.gt_blurred(), &blurred)?;
    let etg_poses: Vec<(u64, Pose6D)> = sim.poses.iter().enumerate().map(|(i, p)| (i as u64, *p)).collect();
    write_poses(&ds.gt_etg_poses(), &etg_poses)?;
    write_gaze(&ds.gaze(), &sim.samples)?;
    write_fixations(&ds.gt_fixations(), &sim.truth)?;

    Ok(DatasetSummary {
        scan_frames: times.len(),
        etg_frames: etg_times.len(),
        gaze_samples: sim.samples.len(),
        valid_gaze: sim.samples.iter().filter(|s| s.valid).count(),
        gt_polygons: polygons.len(),
        blurred_frames,
    })
}

/// Frame ids listed in `gt/etg_blurred.csv`.
pub fn read_blurred(path: &Path) -> Result<Vec<u64>, FormatError> {
    let text = read_text(path)?;
    csv_rows(path, &text).iter().map(|r| r.get(0)).collect()
}

//! Batch driver: every stage reads and writes plain files under one work
//! directory, so stages can be run one by one or all at once.
//!
//! ```text
//! map/        mesh.ply, poses.csv, tracking.csv, sparse/, grid/
//! localize/   poses.csv, frames.csv, report.txt
//! gaze/       hits.csv, saliency.csv, saliency.ply, summary.txt
//! detect/     detections_raw.csv, detections.csv
//! roi/        rois.csv
//! report/     report.txt, *.csv
//! ```
//!
//! Each stage directory also gets a `manifest.txt`.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::PipelineConfig;

use crate::gaze::io::{read_gaze, read_hits, read_saliency, write_hits, write_saliency, write_saliency_ply};
use crate::gaze::{accumulate_saliency, recover_fixation, FixationHit, GazeError, ObbTree};
use crate::geometry::{Intrinsics, Pose6D};
use crate::io::{csv_rows, read_intrinsics, read_poses, read_text, write_poses, write_text, FormatError};
use crate::metrics::{
    aoi_hits, compute_dwells, format_ratio, match_detections, overlap_3d, DetectionStats, FramePolygons,
    LocalizationRow, MetricsError, MetricsReport, RoiReport,
};
use crate::raster::{ColorImage, DepthImage};
use crate::roi::{
    detect_logo, filter_detections, load_logos, map_roi_3d, read_detections, read_rois, write_detections, write_rois,
    Detection2D, Roi3D, RoiError,
};
use crate::slam::{extract_features, localize_monocular, Keypoint, SlamError, SparseMap, Tracker};
use crate::surface::ply::{read_mesh, write_mesh, PlyFormat};
use crate::surface::{colorize_mesh, extract_isosurface, ColorFrame, Occlusion, SurfaceError, TriangleMesh};
use crate::synth::dataset::{generate, read_blurred, read_frames, Dataset, DatasetSummary};
use crate::synth::{Scene, SynthError};
use crate::volume::{VolumeError, VoxelGrid};

pub const MAP_DIR: &str = "map";
pub const LOCALIZE_DIR: &str = "localize";
pub const GAZE_DIR: &str = "gaze";
pub const DETECT_DIR: &str = "detect";
pub const ROI_DIR: &str = "roi";
pub const REPORT_DIR: &str = "report";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
}

impl PipelineError {
    pub fn category(&self) -> &'static str {
        match self {
            Self::Config(_) => "config-invalid",
            Self::Input(_) => "input-invalid",
            Self::Io(_) => "io-error",
            Self::Numerical(_) => "numerical-failure",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Input(_) | Self::Io(_) => 3,
            Self::Numerical(_) => 4,
        }
    }

    /// `category: message` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("{}: {msg}", self.category())
    }
}

impl From<FormatError> for PipelineError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io { .. } => Self::Io(e.to_string()),
            FormatError::Parse { .. } => Self::Input(e.to_string()),
        }
    }
}

impl From<SlamError> for PipelineError {
    fn from(e: SlamError) -> Self {
        match e {
            SlamError::Format(f) => f.into(),
            SlamError::ImageTooSmall { .. } => Self::Input(e.to_string()),
            e => Self::Numerical(e.to_string()),
        }
    }
}

impl From<VolumeError> for PipelineError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::Format(f) => f.into(),
            VolumeError::InvalidGrid(_) => Self::Config(e.to_string()),
            VolumeError::BackingStoreFailure(_) => Self::Io(e.to_string()),
            e => Self::Input(e.to_string()),
        }
    }
}

impl From<SurfaceError> for PipelineError {
    fn from(e: SurfaceError) -> Self {
        match e {
            SurfaceError::Volume(v) => v.into(),
            SurfaceError::FrameSizeMismatch { .. } => Self::Input(e.to_string()),
            e => Self::Numerical(e.to_string()),
        }
    }
}

impl From<GazeError> for PipelineError {
    fn from(e: GazeError) -> Self {
        match e {
            GazeError::InvalidSigma(_) => Self::Config(e.to_string()),
            GazeError::MeshMismatch { .. } | GazeError::InvalidSample(_) => Self::Input(e.to_string()),
            GazeError::EmptyMesh => Self::Numerical(e.to_string()),
        }
    }
}

impl From<RoiError> for PipelineError {
    fn from(e: RoiError) -> Self {
        match e {
            RoiError::Format(f) => f.into(),
            RoiError::Features(s) => s.into(),
            e => Self::Input(e.to_string()),
        }
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Format(f) => f.into(),
            SynthError::Roi(r) => r.into(),
            e => Self::Input(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e).into())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Input(format!("{}: not found", path.display())))
    }
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| FormatError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| FormatError::io(dir, err)))
        .collect::<std::result::Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    Ok(config::hex(&Sha256::digest(&bytes)))
}

/// Writes `dir/manifest.txt`: stage, config hash, seed, inputs and the
/// sha256 of every other file under `dir`.
pub fn write_manifest(dir: &Path, stage: &str, cfg: &PipelineConfig, inputs: &[PathBuf]) -> Result<()> {
    let mut s = format!("stage = {stage}\nconfig_sha256 = {}\nseed = {}\n", cfg.hash(), cfg.seed);
    for i in inputs {
        s.push_str(&format!("input = {}\n", i.display()));
    }
    let mut files = Vec::new();
    files_under(dir, &mut files)?;
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        if rel == Path::new(MANIFEST) {
            continue;
        }
        s.push_str(&format!("output = {} {}\n", rel.display(), sha256_file(&f)?));
    }
    Ok(write_text(&dir.join(MANIFEST), &s)?)
}

/// Keypoints of every listed frame, in frame order.
fn frame_features(
    frames: &[(u64, f64)],
    path: impl Fn(u64) -> PathBuf + Sync,
    cfg: &PipelineConfig,
) -> Result<Vec<Vec<Keypoint>>> {
    let sift = cfg.features.sift();
    frames
        .par_iter()
        .map(|(id, _)| {
            let img = ColorImage::load_png(&path(*id))?;
            Ok(extract_features(&img.to_gray(), &sift)?)
        })
        .collect()
}

fn check_size(k: &Intrinsics, w: usize, h: usize, path: &Path) -> Result<()> {
    if (w, h) != (k.width as usize, k.height as usize) {
        return Err(PipelineError::Input(format!(
            "{}: image is {w}x{h}, intrinsics expect {}x{}",
            path.display(),
            k.width,
            k.height
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapSummary {
    pub frames: usize,
    pub tracked: usize,
    pub keyframes: usize,
    pub landmarks: usize,
    pub triangles: usize,
}

/// RGB-D scan → sparse map, occupancy grid and colored mesh.
pub fn map_build(ds: &Dataset, work: &Path, cfg: &PipelineConfig) -> Result<MapSummary> {
    map_build_with_features(ds, work, cfg).map(|r| r.0)
}

fn map_build_with_features(
    ds: &Dataset,
    work: &Path,
    cfg: &PipelineConfig,
) -> Result<(MapSummary, Vec<Vec<Keypoint>>)> {
    let dir = work.join(MAP_DIR);
    create_dir(&dir)?;
    let k = read_intrinsics(&ds.scan_intrinsics())?;
    let frames = read_frames(&ds.scan_frames())?;
    let anchor = read_poses(&ds.scan_anchor())?;
    let Some(&(anchor_id, anchor_pose)) = anchor.first() else {
        return Err(PipelineError::Input("anchor pose file is empty".into()));
    };
    if frames.first().map(|f| f.0) != Some(anchor_id) {
        return Err(PipelineError::Input(format!(
            "anchor pose is for frame {anchor_id}, the scan starts elsewhere"
        )));
    }
    let features = frame_features(&frames, |id| ds.scan_color(id), cfg)?;

    let mut tracker = Tracker::new(cfg.tracking.tracker(cfg.seed));
    let mut map = SparseMap::default();
    let mut tracked: BTreeMap<u64, Pose6D> = BTreeMap::new();
    let mut log = String::from("frame_id,status,matches,inliers,keyframe\n");
    for ((id, _), kps) in frames.iter().zip(&features) {
        let depth = DepthImage::load_png(&ds.scan_depth(*id))?;
        check_size(&k, depth.width, depth.height, &ds.scan_depth(*id))?;
        if tracked.is_empty() && map.keyframes.is_empty() {
            let n = tracker.initialize(&mut map, *id, kps.clone(), &depth, anchor_pose, &k);
            tracked.insert(*id, anchor_pose);
            log.push_str(&format!("{id},tracked,{n},{n},1\n"));
            continue;
        }
        match tracker.track_frame(&mut map, *id, kps.clone(), Some(&depth), &k) {
            Ok(o) => {
                tracked.insert(*id, o.pose);
                log.push_str(&format!("{id},tracked,{},{},{}\n", o.matches, o.inliers, o.new_keyframe as u8));
            }
            Err(SlamError::LocalizationFailed(f)) => log.push_str(&format!("{id},{},0,0,0\n", f.reason())),
            Err(e) => return Err(e.into()),
        }
    }
    // Bundle adjustment moves keyframes after they were tracked.
    for kf in &map.keyframes {
        tracked.insert(kf.id, kf.pose);
    }
    map.build_vocabulary(cfg.tracking.vocabulary_branching, cfg.tracking.vocabulary_levels, cfg.seed)?;

    let v = &cfg.volume;
    let mut grid = VoxelGrid::new(v.origin(), v.voxel_size, v.dims, v.sub_volume_edge)?;
    grid.set_page_budget(v.page_budget)?;
    let params = v.integration();
    for (id, pose) in &tracked {
        let depth = DepthImage::load_png(&ds.scan_depth(*id))?;
        grid.integrate_depth(&depth, pose, &k, &params)?;
    }
    let mesh = extract_isosurface(&mut grid, v.iso)?;
    let tree = ObbTree::build(&mesh)?;
    let color_frames = map
        .keyframes
        .iter()
        .map(|kf| {
            let image = ColorImage::load_png(&ds.scan_color(kf.id))?;
            Ok(ColorFrame { image, pose: kf.pose })
        })
        .collect::<Result<Vec<_>>>()?;
    let occlusion = Occlusion {
        tree: &tree,
        tolerance: v.occlusion_voxels * v.voxel_size,
    };
    let mesh = colorize_mesh(&mesh, &color_frames, &k, Some(occlusion))?;

    write_mesh(&dir.join("mesh.ply"), &mesh, PlyFormat::BinaryLittleEndian)?;
    let poses: Vec<(u64, Pose6D)> = tracked.into_iter().collect();
    write_poses(&dir.join("poses.csv"), &poses)?;
    write_text(&dir.join("tracking.csv"), &log)?;
    map.save(&dir.join("sparse"))?;
    grid.save(&dir.join("grid"))?;
    write_manifest(
        &dir,
        "map-build",
        cfg,
        &[ds.scan_intrinsics(), ds.scan_frames(), ds.scan_anchor(), ds.root.join("scan")],
    )?;
    let summary = MapSummary {
        frames: frames.len(),
        tracked: poses.len(),
        keyframes: map.keyframes.len(),
        landmarks: map.landmarks.len(),
        triangles: mesh.triangles.len(),
    };
    Ok((summary, features))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalizeSummary {
    pub localized: usize,
    pub total: usize,
}

/// Eye-tracker frames → poses against the map built by [`map_build`].
pub fn localize(ds: &Dataset, work: &Path, cfg: &PipelineConfig) -> Result<LocalizeSummary> {
    let dir = work.join(LOCALIZE_DIR);
    let sparse = work.join(MAP_DIR).join("sparse");
    require(&sparse)?;
    create_dir(&dir)?;
    let map = SparseMap::load(&sparse)?;
    let k = read_intrinsics(&ds.etg_intrinsics())?;
    let frames = read_frames(&ds.etg_frames())?;
    let features = frame_features(&frames, |id| ds.etg_color(id), cfg)?;
    let params = cfg.tracking.tracker(cfg.seed);
    let results: Vec<std::result::Result<_, SlamError>> = features
        .par_iter()
        .map(|kps| match localize_monocular(&map, kps, &k, &params) {
            Ok(l) => Ok(Ok(l)),
            Err(SlamError::LocalizationFailed(f)) => Ok(Err(f)),
            Err(e) => Err(e),
        })
        .collect();
    let mut poses = Vec::new();
    let mut log = String::from("frame_id,status,matches,inliers\n");
    for ((id, _), r) in frames.iter().zip(results) {
        match r? {
            Ok(l) => {
                poses.push((*id, l.pose));
                log.push_str(&format!("{id},localized,{},{}\n", l.matches, l.inliers));
            }
            Err(f) => log.push_str(&format!("{id},{},,\n", f.reason())),
        }
    }
    let summary = LocalizeSummary {
        localized: poses.len(),
        total: frames.len(),
    };
    write_poses(&dir.join("poses.csv"), &poses)?;
    write_text(&dir.join("frames.csv"), &log)?;
    write_text(
        &dir.join("report.txt"),
        &format!(
            "[localization etg]\nframes = {}\nlocalized = {}\n",
            summary.total,
            format_ratio(summary.localized, summary.total)
        ),
    )?;
    write_manifest(&dir, "localize", cfg, &[sparse, ds.etg_intrinsics(), ds.etg_frames(), ds.root.join("etg")])?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GazeSummary {
    pub samples: usize,
    pub valid: usize,
    /// Valid samples whose frame was localized.
    pub localized: usize,
    pub hits: usize,
}

/// The frame nearest to `t` within half the median frame spacing.
fn nearest_frame(frames: &[(u64, f64)], half_gap: f64, t: f64) -> Option<u64> {
    let i = frames.partition_point(|f| f.1 < t);
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter_map(|j| frames.get(j))
        .map(|f| ((f.1 - t).abs(), f.0))
        .filter(|(d, _)| *d <= half_gap)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|f| f.1)
}

fn half_frame_gap(frames: &[(u64, f64)]) -> f64 {
    let mut gaps: Vec<f64> = frames.windows(2).map(|w| w[1].1 - w[0].1).collect();
    if gaps.is_empty() {
        return f64::INFINITY;
    }
    gaps.sort_by(f64::total_cmp);
    0.5 * gaps[gaps.len() / 2]
}

/// Gaze samples + localized frames → fixation hits and saliency.
pub fn gaze_map(ds: &Dataset, work: &Path, cfg: &PipelineConfig) -> Result<GazeSummary> {
    let dir = work.join(GAZE_DIR);
    let mesh_path = work.join(MAP_DIR).join("mesh.ply");
    let poses_path = work.join(LOCALIZE_DIR).join("poses.csv");
    require(&mesh_path)?;
    require(&poses_path)?;
    create_dir(&dir)?;
    let mesh = read_mesh(&mesh_path)?;
    let tree = ObbTree::build(&mesh)?;
    let poses: BTreeMap<u64, Pose6D> = read_poses(&poses_path)?.into_iter().collect();
    let k = read_intrinsics(&ds.etg_intrinsics())?;
    let frames = read_frames(&ds.etg_frames())?;
    let half_gap = half_frame_gap(&frames);
    let samples = read_gaze(&ds.gaze())?;

    let mut located = Vec::new();
    for s in samples.iter().filter(|s| s.valid) {
        if let Some(pose) = nearest_frame(&frames, half_gap, s.timestamp).and_then(|f| poses.get(&f)) {
            located.push((*s, *pose));
        }
    }
    let hits: Vec<FixationHit> = located
        .par_iter()
        .map(|(s, pose)| recover_fixation(pose, &k, s, &tree))
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let saliency = accumulate_saliency(&hits, &mesh, &tree, cfg.gaze.sigma)?;
    write_hits(&dir.join("hits.csv"), &hits)?;
    write_saliency(&dir.join("saliency.csv"), &saliency)?;
    write_saliency_ply(&dir.join("saliency.ply"), &mesh, &saliency.weights, PlyFormat::BinaryLittleEndian)?;
    let summary = GazeSummary {
        samples: samples.len(),
        valid: samples.iter().filter(|s| s.valid).count(),
        localized: located.len(),
        hits: hits.len(),
    };
    write_text(
        &dir.join("summary.txt"),
        &format!(
            "samples = {}\nvalid = {}\nlocalized = {}\nhits = {}\nsaliency_total = {:.6}\n",
            summary.samples,
            summary.valid,
            summary.localized,
            summary.hits,
            saliency.total()
        ),
    )?;
    write_manifest(&dir, "gaze-map", cfg, &[mesh_path, poses_path, ds.gaze(), ds.etg_frames()])?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectSummary {
    pub raw: usize,
    pub kept: usize,
}

/// Scan frames + reference logos → raw and filtered detections.
pub fn roi_detect(ds: &Dataset, work: &Path, cfg: &PipelineConfig) -> Result<DetectSummary> {
    roi_detect_with(ds, work, cfg, None)
}

fn roi_detect_with(
    ds: &Dataset,
    work: &Path,
    cfg: &PipelineConfig,
    features: Option<Vec<Vec<Keypoint>>>,
) -> Result<DetectSummary> {
    let dir = work.join(DETECT_DIR);
    create_dir(&dir)?;
    let k = read_intrinsics(&ds.scan_intrinsics())?;
    let frames = read_frames(&ds.scan_frames())?;
    let logos = load_logos(&ds.logos(), &cfg.features.sift())?;
    let features = match features {
        Some(f) => f,
        None => frame_features(&frames, |id| ds.scan_color(id), cfg)?,
    };
    let params = cfg.roi.detect(cfg.seed);
    let raw: Vec<Detection2D> = frames
        .par_iter()
        .zip(&features)
        .flat_map_iter(|((id, _), kps)| {
            logos
                .iter()
                .filter_map(|l| detect_logo(*id, kps, l, &params))
                .collect::<Vec<_>>()
        })
        .collect();
    let kept = filter_detections(&raw, k.diagonal(), &cfg.roi.filter());
    write_detections(&dir.join("detections_raw.csv"), &raw)?;
    write_detections(&dir.join("detections.csv"), &kept)?;
    write_manifest(&dir, "roi-detect", cfg, &[ds.logos(), ds.scan_frames(), ds.root.join("scan/color")])?;
    Ok(DetectSummary {
        raw: raw.len(),
        kept: kept.len(),
    })
}

/// Logo id → reference boundary rectangle, from `logos.csv`.
pub fn logo_boundaries(dir: &Path) -> Result<BTreeMap<u32, [f64; 4]>> {
    let path = dir.join("logos.csv");
    let text = read_text(&path)?;
    let mut out = BTreeMap::new();
    for row in csv_rows(&path, &text) {
        row.expect_len(6)?;
        out.insert(row.get(0)?, [row.get(2)?, row.get(3)?, row.get(4)?, row.get(5)?]);
    }
    Ok(out)
}

fn by_logo(detections: Vec<Detection2D>) -> BTreeMap<u32, Vec<Detection2D>> {
    let mut out: BTreeMap<u32, Vec<Detection2D>> = BTreeMap::new();
    for d in detections {
        out.entry(d.logo_id).or_default().push(d);
    }
    out
}

/// Roi3D per logo, or `None` when no detection frame has a pose.
fn map_logos(
    detections: BTreeMap<u32, Vec<Detection2D>>,
    poses: &BTreeMap<u64, Pose6D>,
    k: &Intrinsics,
    mesh: &TriangleMesh,
    tree: &ObbTree,
    cfg: &PipelineConfig,
) -> Result<BTreeMap<u32, Roi3D>> {
    let params = cfg.roi.map().map_err(PipelineError::Config)?;
    let mut out = BTreeMap::new();
    for (id, dets) in detections {
        match map_roi_3d(id, &dets, poses, k, mesh, tree, &params) {
            Ok(r) => {
                out.insert(id, r);
            }
            Err(RoiError::NoLocalizedDetections) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Filtered detections + scan poses → one Roi3D per logo.
pub fn roi_map(ds: &Dataset, work: &Path, cfg: &PipelineConfig) -> Result<usize> {
    let dir = work.join(ROI_DIR);
    let det_path = work.join(DETECT_DIR).join("detections.csv");
    let mesh_path = work.join(MAP_DIR).join("mesh.ply");
    let poses_path = work.join(MAP_DIR).join("poses.csv");
    for p in [&det_path, &mesh_path, &poses_path] {
        require(p)?;
    }
    create_dir(&dir)?;
    let k = read_intrinsics(&ds.scan_intrinsics())?;
    let detections = read_detections(&det_path, &logo_boundaries(&ds.logos())?)?;
    let mesh = read_mesh(&mesh_path)?;
    let tree = ObbTree::build(&mesh)?;
    let poses: BTreeMap<u64, Pose6D> = read_poses(&poses_path)?.into_iter().collect();
    let rois = map_logos(by_logo(detections), &poses, &k, &mesh, &tree, cfg)?;
    let rois: Vec<Roi3D> = rois.into_values().collect();
    write_rois(&dir.join("rois.csv"), &rois)?;
    write_manifest(&dir, "roi-map", cfg, &[det_path, mesh_path, poses_path, ds.logos()])?;
    Ok(rois.len())
}

fn polygons(dets: &[Detection2D]) -> FramePolygons {
    let mut out = FramePolygons::new();
    for d in dets {
        out.entry(d.frame_id).or_default().push(d.polygon.to_vec());
    }
    out
}

/// Frame id → status column of a per-frame log.
fn read_status(path: &Path) -> Result<Vec<(u64, String)>> {
    let text = read_text(path)?;
    csv_rows(path, &text)
        .iter()
        .map(|r| Ok((r.get(0)?, r.get(1)?)))
        .collect()
}

/// Everything → metrics report. Ground-truth comparisons are added when
/// the dataset carries `scene.toml` and `gt/polygons.csv`.
pub fn analyze(ds: &Dataset, work: &Path, cfg: &PipelineConfig) -> Result<MetricsReport> {
    let dir = work.join(REPORT_DIR);
    let mesh_path = work.join(MAP_DIR).join("mesh.ply");
    let poses_path = work.join(MAP_DIR).join("poses.csv");
    let loc_path = work.join(LOCALIZE_DIR).join("frames.csv");
    let hits_path = work.join(GAZE_DIR).join("hits.csv");
    let sal_path = work.join(GAZE_DIR).join("saliency.csv");
    let det_path = work.join(DETECT_DIR).join("detections.csv");
    let rois_path = work.join(ROI_DIR).join("rois.csv");
    let inputs = vec![
        mesh_path.clone(),
        poses_path.clone(),
        loc_path.clone(),
        hits_path.clone(),
        sal_path.clone(),
        det_path.clone(),
        rois_path.clone(),
        ds.gaze(),
    ];
    for p in &inputs {
        require(p)?;
    }
    create_dir(&dir)?;
    let a = &cfg.analysis;
    let mesh = read_mesh(&mesh_path)?;
    let tree = ObbTree::build(&mesh)?;
    let k = read_intrinsics(&ds.scan_intrinsics())?;
    let poses: BTreeMap<u64, Pose6D> = read_poses(&poses_path)?.into_iter().collect();
    let boundaries = logo_boundaries(&ds.logos())?;
    let auto: BTreeMap<u32, Roi3D> = read_rois(&rois_path, &mesh)?.into_iter().map(|r| (r.roi_id, r)).collect();
    let detections = by_logo(read_detections(&det_path, &boundaries)?);
    let hits = read_hits(&hits_path)?;
    let samples = read_gaze(&ds.gaze())?;

    let status = read_status(&loc_path)?;
    let mut localization = vec![LocalizationRow {
        session: "etg".into(),
        localized: status.iter().filter(|s| s.1 == "localized").count(),
        total: status.len(),
    }];
    if ds.gt_blurred().exists() {
        let blurred: BTreeSet<u64> = read_blurred(&ds.gt_blurred())?.into_iter().collect();
        let clean: Vec<_> = status.iter().filter(|s| !blurred.contains(&s.0)).collect();
        localization.push(LocalizationRow {
            session: "etg-clean".into(),
            localized: clean.iter().filter(|s| s.1 == "localized").count(),
            total: clean.len(),
        });
    }

    let scene = if ds.scene().exists() {
        Some(Scene::parse(&read_text(&ds.scene())?)?)
    } else {
        None
    };
    let gt_dets = if ds.gt_polygons().exists() {
        Some(by_logo(read_detections(&ds.gt_polygons(), &boundaries)?))
    } else {
        None
    };
    let gt2d = match &gt_dets {
        Some(g) => map_logos(g.clone(), &poses, &k, &mesh, &tree, cfg)?,
        None => BTreeMap::new(),
    };
    let mut analytic = BTreeMap::new();
    if let Some(scene) = &scene {
        for id in boundaries.keys() {
            let set = scene.logo_triangles(*id, &mesh, a.roi_plane_tolerance);
            analytic.insert(*id, Roi3D::new(*id, set, &mesh)?);
        }
    }

    let hit_triangle: BTreeMap<u64, u32> = hits.iter().map(|h| (h.timestamp.to_bits(), h.triangle_id)).collect();
    let mut rois = Vec::new();
    for id in boundaries.keys() {
        let roi = auto.get(id);
        let detection = gt_dets.as_ref().map(|g| {
            let gt = g.get(id).map(|v| polygons(v)).unwrap_or_default();
            let det = detections.get(id).map(|v| polygons(v)).unwrap_or_default();
            let m = match_detections(&det, &gt, a.overlap_threshold);
            DetectionStats::from_match(&m, &gt.keys().copied().collect())
        });
        let truth = analytic.get(id);
        let overlap = |r: Option<&Roi3D>| match (r, truth) {
            (Some(r), Some(t)) => overlap_3d(r, t, &mesh).ok(),
            _ => None,
        };
        let (aoi, dwells) = match roi {
            Some(r) => {
                let flags: Vec<(f64, bool)> = samples
                    .iter()
                    .map(|s| {
                        let hit = hit_triangle
                            .get(&s.timestamp.to_bits())
                            .is_some_and(|t| r.triangle_ids.contains(&(*t as usize)));
                        (s.timestamp, hit)
                    })
                    .collect();
                (aoi_hits(&hits, r).len(), compute_dwells(&flags, *id, a.sample_period, a.min_dwell)?)
            }
            None => (0, Vec::new()),
        };
        rois.push(RoiReport {
            roi_id: *id,
            detection,
            area: roi.map_or(0.0, |r| r.area),
            overlap_3d_automatic: overlap(roi),
            overlap_3d_ground_truth_2d: overlap(gt2d.get(id)),
            aoi_hits: aoi,
            dwells,
        });
    }
    let saliency = read_saliency(&sal_path, mesh.triangles.len())?;
    let report = MetricsReport {
        localization,
        rois,
        fixation_hits: hits.len(),
        saliency_total: saliency.iter().fold(0.0, |a, w| a + w),
        dwell_bin_width: a.dwell_bin_width,
    };
    write_text(&dir.join("report.txt"), &report.to_text())?;
    for (name, text) in report.csv_exports() {
        write_text(&dir.join(name), &text)?;
    }
    if !gt2d.is_empty() {
        write_rois(&dir.join("rois_gt2d.csv"), &gt2d.values().cloned().collect::<Vec<_>>())?;
    }
    if !analytic.is_empty() {
        write_rois(&dir.join("rois_analytic.csv"), &analytic.values().cloned().collect::<Vec<_>>())?;
    }
    let mut inputs = inputs;
    inputs.extend([ds.logos(), ds.scene(), ds.gt_polygons(), ds.gt_blurred()].into_iter().filter(|p| p.exists()));
    write_manifest(&dir, "analyze", cfg, &inputs)?;
    Ok(report)
}

/// Renders a synthetic dataset and writes its manifest.
pub fn synth(scene: &str, session: &str, root: &Path, cfg: &PipelineConfig) -> Result<DatasetSummary> {
    create_dir(root)?;
    let summary = generate(scene, session, cfg.seed, root)?;
    write_manifest(root, "synth", cfg, &[])?;
    Ok(summary)
}

/// All stages in order. Scan features are extracted once and shared by
/// map building and logo detection.
pub fn run_all(ds: &Dataset, work: &Path, cfg: &PipelineConfig) -> Result<MetricsReport> {
    let (_, features) = map_build_with_features(ds, work, cfg)?;
    localize(ds, work, cfg)?;
    gaze_map(ds, work, cfg)?;
    roi_detect_with(ds, work, cfg, Some(features))?;
    roi_map(ds, work, cfg)?;
    analyze(ds, work, cfg)
}

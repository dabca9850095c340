//! Every pipeline tunable, loaded from TOML with unknown keys rejected.

use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::roi::{DetectParams, FilterParams, MapParams, MembershipRule};
use crate::slam::ba::BaParams;
use crate::slam::{PnpParams, SiftParams, TrackerParams};
use crate::volume::IntegrationParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeConfig {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub sub_volume_edge: usize,
    /// Resident sub-volume limit; unlimited when absent.
    pub page_budget: Option<usize>,
    pub l_occ: f32,
    pub l_free: f32,
    pub l_min: f32,
    pub l_max: f32,
    pub max_range: f64,
    pub pixel_stride: usize,
    /// Iso-probability of the extracted surface.
    pub iso: f64,
    /// Coloring occlusion tolerance in voxels.
    pub occlusion_voxels: f64,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        let p = IntegrationParams::default();
        Self {
            origin: [-1.278, -1.202, -0.078],
            voxel_size: 0.02,
            dims: [128, 128, 128],
            sub_volume_edge: 64,
            page_budget: None,
            l_occ: p.l_occ,
            l_free: p.l_free,
            l_min: p.l_min,
            l_max: p.l_max,
            max_range: p.max_range,
            pixel_stride: 2,
            iso: 0.5,
            occlusion_voxels: 1.5,
        }
    }
}

impl VolumeConfig {
    pub fn integration(&self) -> IntegrationParams {
        IntegrationParams {
            l_occ: self.l_occ,
            l_free: self.l_free,
            l_min: self.l_min,
            l_max: self.l_max,
            max_range: self.max_range,
            pixel_stride: self.pixel_stride,
        }
    }

    pub fn origin(&self) -> Vector3<f64> {
        Vector3::new(self.origin[0], self.origin[1], self.origin[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub octave_layers: usize,
    pub sigma: f64,
    pub contrast_threshold: f64,
    pub edge_threshold: f64,
    /// 0 keeps every keypoint.
    pub max_features: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let p = SiftParams::default();
        Self {
            octave_layers: p.octave_layers,
            sigma: p.sigma,
            contrast_threshold: p.contrast_threshold,
            edge_threshold: p.edge_threshold,
            max_features: p.max_features.unwrap_or(0),
        }
    }
}

impl FeatureConfig {
    pub fn sift(&self) -> SiftParams {
        SiftParams {
            octave_layers: self.octave_layers,
            sigma: self.sigma,
            contrast_threshold: self.contrast_threshold,
            edge_threshold: self.edge_threshold,
            max_features: (self.max_features > 0).then_some(self.max_features),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub ratio: f64,
    pub inlier_threshold_px: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub neighbor_keyframes: usize,
    pub min_matches: usize,
    pub min_inliers: usize,
    pub keyframe_inlier_fraction: f64,
    pub keyframe_translation: f64,
    /// Bundle adjustment window W (keyframes).
    pub ba_window: usize,
    pub huber_delta_px: f64,
    pub max_depth: f64,
    pub retrieval_candidates: usize,
    pub vocabulary_branching: usize,
    pub vocabulary_levels: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        let t = TrackerParams::default();
        let ba = BaParams::default();
        Self {
            ratio: t.ratio,
            inlier_threshold_px: t.pnp.inlier_threshold_px,
            confidence: t.pnp.confidence,
            max_iterations: t.pnp.max_iterations,
            neighbor_keyframes: t.neighbor_keyframes,
            min_matches: t.min_matches,
            min_inliers: t.min_inliers,
            keyframe_inlier_fraction: t.keyframe_inlier_fraction,
            keyframe_translation: t.keyframe_translation,
            ba_window: t.ba_window,
            huber_delta_px: ba.huber_delta_px,
            max_depth: t.max_depth,
            retrieval_candidates: t.retrieval_candidates,
            vocabulary_branching: 10,
            vocabulary_levels: 3,
        }
    }
}

impl TrackingConfig {
    pub fn tracker(&self, seed: u64) -> TrackerParams {
        TrackerParams {
            ratio: self.ratio,
            pnp: PnpParams {
                inlier_threshold_px: self.inlier_threshold_px,
                confidence: self.confidence,
                max_iterations: self.max_iterations,
                seed,
            },
            neighbor_keyframes: self.neighbor_keyframes,
            min_matches: self.min_matches,
            min_inliers: self.min_inliers,
            keyframe_inlier_fraction: self.keyframe_inlier_fraction,
            keyframe_translation: self.keyframe_translation,
            ba_window: self.ba_window,
            max_depth: self.max_depth,
            retrieval_candidates: self.retrieval_candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GazeConfig {
    /// Saliency kernel width (m).
    pub sigma: f64,
}

impl Default for GazeConfig {
    fn default() -> Self {
        Self {
            sigma: crate::gaze::DEFAULT_SIGMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    pub ratio: f64,
    pub min_inliers: usize,
    pub homography_threshold_px: f64,
    pub homography_confidence: f64,
    pub homography_max_iterations: usize,
    pub max_displacement: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub neighbor_frames: u64,
    pub vote_fraction: f64,
    /// `all-vertices`, `centroid` or `any-vertex`.
    pub membership: String,
    pub inside_tolerance_px: f64,
}

impl Default for RoiConfig {
    fn default() -> Self {
        let d = DetectParams::default();
        let f = FilterParams::default();
        let m = MapParams::default();
        Self {
            ratio: d.ratio,
            min_inliers: d.min_inliers,
            homography_threshold_px: d.homography.threshold_px,
            homography_confidence: d.homography.confidence,
            homography_max_iterations: d.homography.max_iterations,
            max_displacement: f.max_displacement,
            min_scale: f.min_scale,
            max_scale: f.max_scale,
            neighbor_frames: f.neighbor_frames,
            vote_fraction: m.vote_fraction,
            membership: "all-vertices".into(),
            inside_tolerance_px: m.inside_tolerance_px,
        }
    }
}

impl RoiConfig {
    pub fn detect(&self, seed: u64) -> DetectParams {
        let mut d = DetectParams {
            ratio: self.ratio,
            min_inliers: self.min_inliers,
            ..Default::default()
        };
        d.homography.threshold_px = self.homography_threshold_px;
        d.homography.confidence = self.homography_confidence;
        d.homography.max_iterations = self.homography_max_iterations;
        d.homography.seed = seed;
        d
    }

    pub fn filter(&self) -> FilterParams {
        FilterParams {
            max_displacement: self.max_displacement,
            min_scale: self.min_scale,
            max_scale: self.max_scale,
            neighbor_frames: self.neighbor_frames,
        }
    }

    pub fn map(&self) -> Result<MapParams, String> {
        Ok(MapParams {
            vote_fraction: self.vote_fraction,
            rule: MembershipRule::from_str(&self.membership).map_err(|e| e.to_string())?,
            inside_tolerance_px: self.inside_tolerance_px,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// 2D IoU needed for a detection to match ground truth.
    pub overlap_threshold: f64,
    /// Dwells shorter than this are dropped (s).
    pub min_dwell: f64,
    /// Nominal gaze sample period (s).
    pub sample_period: f64,
    pub dwell_bin_width: f64,
    /// Distance (m) from a logo plane within which mesh triangles belong
    /// to the analytic ROI.
    pub roi_plane_tolerance: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            overlap_threshold: 0.5,
            min_dwell: 0.0,
            sample_period: 1.0 / 30.0,
            dwell_bin_width: 0.1,
            roi_plane_tolerance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds every randomized step (RANSAC, vocabulary, synthesis).
    pub seed: u64,
    pub volume: VolumeConfig,
    pub features: FeatureConfig,
    pub tracking: TrackingConfig,
    pub gaze: GazeConfig,
    pub roi: RoiConfig,
    pub analysis: AnalysisConfig,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let c: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), String> {
        let v = &self.volume;
        if !(v.voxel_size > 0.0) || v.sub_volume_edge == 0 || v.dims.iter().any(|d| *d == 0 || d % v.sub_volume_edge != 0) {
            return Err("volume: need voxel_size > 0 and dims that are multiples of sub_volume_edge".into());
        }
        self.volume.integration().validate().map_err(|e| e.to_string())?;
        if !(v.iso > 0.0 && v.iso < 1.0) {
            return Err("volume.iso must be in (0, 1)".into());
        }
        if v.page_budget == Some(0) {
            return Err("volume.page_budget must be at least 1".into());
        }
        let t = &self.tracking;
        if !(t.ratio > 0.0 && t.ratio <= 1.0) || !(self.roi.ratio > 0.0 && self.roi.ratio <= 1.0) {
            return Err("ratio tests must be in (0, 1]".into());
        }
        if t.ba_window < 2 || t.vocabulary_branching < 2 || t.vocabulary_levels == 0 {
            return Err("tracking: need ba_window >= 2, vocabulary_branching >= 2, vocabulary_levels >= 1".into());
        }
        if !(self.gaze.sigma > 0.0) {
            return Err("gaze.sigma must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.roi.vote_fraction) {
            return Err("roi.vote_fraction must be in [0, 1]".into());
        }
        self.roi.map()?;
        let a = &self.analysis;
        if !(a.sample_period > 0.0 && a.dwell_bin_width > 0.0 && a.min_dwell >= 0.0) {
            return Err("analysis: sample_period and dwell_bin_width must be positive".into());
        }
        Ok(())
    }

    /// Canonical TOML rendering; the hash is taken over this text.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

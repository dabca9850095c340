//! Sparse feature map, PnP tracking, bundle adjustment and retrieval-based
//! monocular localization.

pub mod ba;
pub mod epnp;
pub mod features;
mod matching;
pub mod pnp;
mod tracker;
pub mod vocab;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

pub use features::{extract_features, Descriptor, FeatureFiles, FeatureSource, Keypoint, SiftLike, SiftParams};
pub use matching::{match_features, DEFAULT_RATIO};
pub use pnp::{estimate_pose_pnp, refine_pose, Correspondence, PnpParams, PnpResult};
pub use tracker::{
    bundle_adjust, localize_monocular, retrieve_candidates, spawn_landmarks, LocalizationFailure, Localized,
    TrackOutcome, Tracker, TrackerParams,
};
pub use vocab::{Vocabulary, WordHistogram};

use crate::geometry::Pose6D;
use crate::io::{csv_rows, format_poses, read_poses, read_text, write_bytes, write_text, FormatError};

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("image {width}x{height} is smaller than 32x32")]
    ImageTooSmall { width: usize, height: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no consensus: best inlier set has {inliers} correspondences")]
    NoConsensus { inliers: usize },
    #[error("singular normal equations")]
    SingularNormalEquations,
    #[error("localization failed: {0}")]
    LocalizationFailed(LocalizationFailure),
    #[error("insufficient observations: {0}")]
    InsufficientObservations(String),
    #[error("training corpus has {size} descriptors, need at least {needed}")]
    CorpusTooSmall { size: usize, needed: usize },
    #[error("vocabulary has not been built")]
    VocabularyMissing,
    #[error("map has no keyframes")]
    EmptyMap,
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub position: Vector3<f64>,
    pub descriptor: Descriptor,
    pub observation_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyFrame {
    pub id: u64,
    pub pose: Pose6D,
    pub keypoints: Vec<Keypoint>,
    pub word_histogram: WordHistogram,
    /// `(keypoint index, landmark id)`, each landmark at most once.
    pub observations: Vec<(usize, u64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseMap {
    pub landmarks: BTreeMap<u64, Landmark>,
    pub keyframes: Vec<KeyFrame>,
    pub vocabulary: Option<Vocabulary>,
    pub next_landmark_id: u64,
}

impl SparseMap {
    pub fn keyframe(&self, id: u64) -> Option<&KeyFrame> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn add_landmark(&mut self, position: Vector3<f64>, descriptor: Descriptor) -> u64 {
        let id = self.next_landmark_id;
        self.next_landmark_id += 1;
        self.landmarks.insert(
            id,
            Landmark {
                id,
                position,
                descriptor,
                observation_count: 0,
            },
        );
        id
    }

    /// Checks that observations reference existing landmarks, at most once
    /// per keyframe.
    pub fn validate(&self) -> Result<(), String> {
        for kf in &self.keyframes {
            let mut seen = std::collections::BTreeSet::new();
            for (kp, lm) in &kf.observations {
                if !self.landmarks.contains_key(lm) {
                    return Err(format!("keyframe {} references missing landmark {lm}", kf.id));
                }
                if *kp >= kf.keypoints.len() {
                    return Err(format!("keyframe {} references missing keypoint {kp}", kf.id));
                }
                if !seen.insert(*lm) {
                    return Err(format!("keyframe {} observes landmark {lm} twice", kf.id));
                }
            }
        }
        Ok(())
    }

    /// Trains the vocabulary on keyframe descriptors and indexes every
    /// keyframe.
    pub fn build_vocabulary(&mut self, branching: usize, levels: usize, seed: u64) -> Result<(), SlamError> {
        let docs: Vec<Vec<Descriptor>> = self
            .keyframes
            .iter()
            .map(|k| k.keypoints.iter().map(|p| p.descriptor).collect())
            .collect();
        self.vocabulary = Some(Vocabulary::build(&docs, branching, levels, seed)?);
        self.index_keyframes();
        Ok(())
    }

    /// Recomputes keyframe histograms and the inverted index.
    pub fn index_keyframes(&mut self) {
        let Some(vocab) = self.vocabulary.as_mut() else {
            return;
        };
        for kf in &mut self.keyframes {
            let d: Vec<Descriptor> = kf.keypoints.iter().map(|p| p.descriptor).collect();
            kf.word_histogram = vocab.histogram(&d);
            vocab.index_document(kf.id, &kf.word_histogram);
        }
    }

    /// Writes `landmarks.bin`, `keyframes.csv`, `observations.csv`,
    /// `vocab.bin` (when built) and `features/frame_<id>.feat`.
    pub fn save(&self, dir: &Path) -> Result<(), FormatError> {
        let mut lm = Vec::new();
        lm.extend_from_slice(&(self.landmarks.len() as u64).to_le_bytes());
        lm.extend_from_slice(&self.next_landmark_id.to_le_bytes());
        for l in self.landmarks.values() {
            lm.extend_from_slice(&l.id.to_le_bytes());
            for v in l.position.iter() {
                lm.extend_from_slice(&v.to_le_bytes());
            }
            lm.extend_from_slice(&l.observation_count.to_le_bytes());
            for v in &l.descriptor {
                lm.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_bytes(&dir.join("landmarks.bin"), &lm)?;
        let poses: Vec<(u64, Pose6D)> = self.keyframes.iter().map(|k| (k.id, k.pose)).collect();
        write_text(&dir.join("keyframes.csv"), &format_poses(&poses))?;
        let mut obs = String::from("keyframe_id,keypoint_index,landmark_id\n");
        for k in &self.keyframes {
            for (kp, l) in &k.observations {
                obs.push_str(&format!("{},{kp},{l}\n", k.id));
            }
        }
        write_text(&dir.join("observations.csv"), &obs)?;
        for k in &self.keyframes {
            features::write_features(&features::feature_path(&dir.join("features"), k.id), &k.keypoints)?;
        }
        match &self.vocabulary {
            Some(v) => v.save(&dir.join("vocab.bin"))?,
            None => {
                let p = dir.join("vocab.bin");
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| FormatError::io(&p, e))?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, FormatError> {
        let p = dir.join("landmarks.bin");
        let bytes = std::fs::read(&p).map_err(|e| FormatError::io(&p, e))?;
        let rec = 8 + 24 + 4 + 4 * features::DESCRIPTOR_LEN;
        if bytes.len() < 16 {
            return Err(FormatError::parse(&p, 0, "truncated landmark file"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let next_landmark_id = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if bytes.len() != 16 + n * rec {
            return Err(FormatError::parse(&p, 0, "landmark file size does not match its count"));
        }
        let mut landmarks = BTreeMap::new();
        for i in 0..n {
            let b = &bytes[16 + i * rec..16 + (i + 1) * rec];
            let f = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
            let id = u64::from_le_bytes(b[..8].try_into().unwrap());
            let mut descriptor = [0.0f32; features::DESCRIPTOR_LEN];
            for (j, d) in descriptor.iter_mut().enumerate() {
                *d = f32::from_le_bytes(b[36 + 4 * j..40 + 4 * j].try_into().unwrap());
            }
            landmarks.insert(
                id,
                Landmark {
                    id,
                    position: Vector3::new(f(8), f(16), f(24)),
                    observation_count: u32::from_le_bytes(b[32..36].try_into().unwrap()),
                    descriptor,
                },
            );
        }
        let poses = read_poses(&dir.join("keyframes.csv"))?;
        let mut keyframes = Vec::with_capacity(poses.len());
        for (id, pose) in poses {
            keyframes.push(KeyFrame {
                id,
                pose,
                keypoints: features::read_features(&features::feature_path(&dir.join("features"), id))?,
                word_histogram: WordHistogram::new(),
                observations: Vec::new(),
            });
        }
        let op = dir.join("observations.csv");
        let text = read_text(&op)?;
        for row in csv_rows(&op, &text) {
            row.expect_len(3)?;
            let kf: u64 = row.get(0)?;
            let k = keyframes
                .iter_mut()
                .find(|k| k.id == kf)
                .ok_or_else(|| FormatError::parse(&op, row.line, format!("unknown keyframe {kf}")))?;
            k.observations.push((row.get(1)?, row.get(2)?));
        }
        let vp = dir.join("vocab.bin");
        let vocabulary = if vp.exists() { Some(Vocabulary::load(&vp)?) } else { None };
        let mut map = SparseMap {
            landmarks,
            keyframes,
            vocabulary,
            next_landmark_id,
        };
        map.validate().map_err(|m| FormatError::parse(&op, 0, m))?;
        map.index_keyframes();
        Ok(map)
    }
}

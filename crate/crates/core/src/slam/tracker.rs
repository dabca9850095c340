use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::Vector2;

use super::ba::{self, BaObservation, BaParams, BaProblem, BaReport};
use super::features::{Descriptor, Keypoint};
use super::matching::{match_features, DEFAULT_RATIO};
use super::pnp::{estimate_pose_pnp, Correspondence, PnpParams};
use super::vocab::WordHistogram;
use super::{KeyFrame, SlamError, SparseMap};
use crate::geometry::{backproject, Intrinsics, Pose6D};
use crate::raster::DepthImage;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerParams {
    pub ratio: f64,
    pub pnp: PnpParams,
    /// Keyframes closest to the previous pose whose landmarks are matched.
    pub neighbor_keyframes: usize,
    pub min_matches: usize,
    pub min_inliers: usize,
    /// New keyframe when inliers drop below this fraction of the last
    /// keyframe's count.
    pub keyframe_inlier_fraction: f64,
    /// New keyframe when the camera moved farther than this (m).
    pub keyframe_translation: f64,
    pub ba_window: usize,
    /// Depths beyond this are not used to create landmarks (m).
    pub max_depth: f64,
    pub retrieval_candidates: usize,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            ratio: DEFAULT_RATIO,
            pnp: PnpParams::default(),
            neighbor_keyframes: 3,
            min_matches: 12,
            min_inliers: 10,
            keyframe_inlier_fraction: 0.6,
            keyframe_translation: 0.3,
            ba_window: 5,
            max_depth: 5.0,
            retrieval_candidates: 5,
        }
    }
}

/// Why a frame could not be localized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalizationFailure {
    RetrievalEmpty,
    TooFewMatches { matches: usize },
    NoConsensus { inliers: usize },
}

impl LocalizationFailure {
    pub fn reason(&self) -> &'static str {
        match self {
            Self::RetrievalEmpty => "retrieval-empty",
            Self::TooFewMatches { .. } => "too-few-matches",
            Self::NoConsensus { .. } => "no-consensus",
        }
    }
}

impl fmt::Display for LocalizationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RetrievalEmpty => write!(f, "retrieval-empty"),
            Self::TooFewMatches { matches } => write!(f, "too-few-matches ({matches})"),
            Self::NoConsensus { inliers } => write!(f, "no-consensus ({inliers} inliers)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutcome {
    pub pose: Pose6D,
    pub matches: usize,
    pub inliers: usize,
    pub new_keyframe: bool,
    pub spawned: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localized {
    pub pose: Pose6D,
    pub matches: usize,
    pub inliers: usize,
    pub candidates: Vec<u64>,
}

/// Incremental RGB-D tracker state.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub params: TrackerParams,
    last_pose: Option<Pose6D>,
    last_keyframe_inliers: usize,
}

fn fail(f: LocalizationFailure) -> SlamError {
    SlamError::LocalizationFailed(f)
}

/// Matches keypoints against landmarks and runs robust PnP.
fn pose_from_landmarks(
    map: &SparseMap,
    landmark_ids: &[u64],
    keypoints: &[Keypoint],
    k: &Intrinsics,
    p: &TrackerParams,
) -> Result<(super::PnpResult, Vec<(usize, u64)>), SlamError> {
    let targets: Vec<Descriptor> = landmark_ids.iter().map(|id| map.landmarks[id].descriptor).collect();
    let query: Vec<Descriptor> = keypoints.iter().map(|kp| kp.descriptor).collect();
    let matches: Vec<(usize, u64)> = match_features(&query, &targets, p.ratio)
        .into_iter()
        .map(|(q, t)| (q, landmark_ids[t]))
        .collect();
    if matches.len() < p.min_matches.max(4) {
        return Err(fail(LocalizationFailure::TooFewMatches { matches: matches.len() }));
    }
    let corr: Vec<Correspondence> = matches
        .iter()
        .map(|(q, l)| Correspondence {
            pixel: keypoints[*q].pixel,
            world: map.landmarks[l].position,
        })
        .collect();
    let result = match estimate_pose_pnp(&corr, k, &p.pnp) {
        Ok(r) => r,
        Err(SlamError::NoConsensus { inliers }) => return Err(fail(LocalizationFailure::NoConsensus { inliers })),
        Err(SlamError::DegenerateConfiguration(_)) | Err(SlamError::SingularNormalEquations) => {
            return Err(fail(LocalizationFailure::NoConsensus { inliers: 0 }))
        }
        Err(e) => return Err(e),
    };
    if result.inlier_count() < p.min_inliers {
        return Err(fail(LocalizationFailure::NoConsensus {
            inliers: result.inlier_count(),
        }));
    }
    Ok((result, matches))
}

/// Depth at the keypoint's nearest pixel, rejected at depth discontinuities.
fn keypoint_depth(depth: &DepthImage, px: &Vector2<f64>, max_depth: f64) -> Option<f64> {
    let (x, y) = (px.x.round() as i64, px.y.round() as i64);
    if x < 1 || y < 1 || x >= depth.width as i64 - 1 || y >= depth.height as i64 - 1 {
        return None;
    }
    let (x, y) = (x as usize, y as usize);
    let d = depth.get(x, y);
    if !(d > 0.0 && d <= max_depth) {
        return None;
    }
    for yy in y - 1..=y + 1 {
        for xx in x - 1..=x + 1 {
            let n = depth.get(xx, yy);
            if !(n > 0.0) || (n - d).abs() > 0.02 * d {
                return None;
            }
        }
    }
    Some(d)
}

/// Turns keypoints of keyframe `kf_index` that are not in `matched` and
/// have usable depth into landmarks observed by that keyframe. Returns the
/// number created.
pub fn spawn_landmarks(
    map: &mut SparseMap,
    kf_index: usize,
    matched: &[bool],
    depth: &DepthImage,
    k: &Intrinsics,
    max_depth: f64,
) -> usize {
    let pose = map.keyframes[kf_index].pose;
    let mut created = Vec::new();
    for (i, kp) in map.keyframes[kf_index].keypoints.iter().enumerate() {
        if matched.get(i).copied().unwrap_or(false) {
            continue;
        }
        let Some(d) = keypoint_depth(depth, &kp.pixel, max_depth) else {
            continue;
        };
        if let Ok(x) = backproject(&kp.pixel, d, &pose, k) {
            created.push((i, x, kp.descriptor));
        }
    }
    let n = created.len();
    for (i, x, desc) in created {
        let id = map.add_landmark(x, desc);
        map.landmarks.get_mut(&id).unwrap().observation_count = 1;
        map.keyframes[kf_index].observations.push((i, id));
    }
    n
}

/// Refines the last `window` keyframes and the landmarks they share
/// (observed at least twice inside the window). The oldest window pose is
/// held fixed.
pub fn bundle_adjust(map: &mut SparseMap, window: usize, k: &Intrinsics) -> Result<BaReport, SlamError> {
    let n = map.keyframes.len();
    let start = n.saturating_sub(window.max(2));
    let kfs = start..n;
    let mut count: BTreeMap<u64, usize> = BTreeMap::new();
    for kf in &map.keyframes[kfs.clone()] {
        for (_, l) in &kf.observations {
            *count.entry(*l).or_insert(0) += 1;
        }
    }
    let shared: Vec<u64> = count.iter().filter(|(_, c)| **c >= 2).map(|(l, _)| *l).collect();
    if kfs.len() < 2 || shared.len() < 10 {
        return Err(SlamError::InsufficientObservations(format!(
            "{} keyframes sharing {} landmarks",
            kfs.len(),
            shared.len()
        )));
    }
    let index: BTreeMap<u64, usize> = shared.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let mut observations = Vec::new();
    for (pi, kf) in map.keyframes[kfs.clone()].iter().enumerate() {
        for (kp, l) in &kf.observations {
            if let Some(j) = index.get(l) {
                observations.push(BaObservation {
                    pose: pi,
                    point: *j,
                    pixel: kf.keypoints[*kp].pixel,
                });
            }
        }
    }
    let mut problem = BaProblem {
        poses: map.keyframes[kfs.clone()].iter().map(|k| k.pose).collect(),
        fixed: (0..kfs.len()).map(|i| i == 0).collect(),
        points: shared.iter().map(|l| map.landmarks[l].position).collect(),
        observations,
    };
    let report = ba::solve(&mut problem, k, &BaParams::default())?;
    for (kf, pose) in map.keyframes[kfs].iter_mut().zip(&problem.poses) {
        kf.pose = *pose;
    }
    for (l, x) in shared.iter().zip(&problem.points) {
        map.landmarks.get_mut(l).unwrap().position = *x;
    }
    Ok(report)
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            last_pose: None,
            last_keyframe_inliers: 0,
        }
    }

    pub fn last_pose(&self) -> Option<Pose6D> {
        self.last_pose
    }

    /// Seeds the map with a first keyframe at a known pose.
    pub fn initialize(
        &mut self,
        map: &mut SparseMap,
        frame_id: u64,
        keypoints: Vec<Keypoint>,
        depth: &DepthImage,
        pose: Pose6D,
        k: &Intrinsics,
    ) -> usize {
        map.keyframes.push(KeyFrame {
            id: frame_id,
            pose,
            keypoints,
            word_histogram: WordHistogram::new(),
            observations: Vec::new(),
        });
        let idx = map.keyframes.len() - 1;
        let spawned = spawn_landmarks(map, idx, &[], depth, k, self.params.max_depth);
        self.last_pose = Some(pose);
        self.last_keyframe_inliers = spawned;
        spawned
    }

    /// Landmarks seen by the keyframes closest to `reference`.
    fn local_landmarks(&self, map: &SparseMap, reference: &Pose6D) -> Vec<u64> {
        let c = reference.camera_center();
        let mut order: Vec<(f64, usize)> = map
            .keyframes
            .iter()
            .enumerate()
            .map(|(i, kf)| ((kf.pose.camera_center() - c).norm(), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        let mut ids = BTreeSet::new();
        for (_, i) in order.into_iter().take(self.params.neighbor_keyframes.max(1)) {
            ids.extend(map.keyframes[i].observations.iter().map(|(_, l)| *l));
        }
        ids.into_iter().collect()
    }

    /// Tracks one frame against the map. With depth, a frame that becomes
    /// a keyframe spawns landmarks and triggers windowed bundle adjustment.
    pub fn track_frame(
        &mut self,
        map: &mut SparseMap,
        frame_id: u64,
        keypoints: Vec<Keypoint>,
        depth: Option<&DepthImage>,
        k: &Intrinsics,
    ) -> Result<TrackOutcome, SlamError> {
        let last_kf = map.keyframes.last().ok_or(SlamError::EmptyMap)?;
        let last_kf_center = last_kf.pose.camera_center();
        let reference = self.last_pose.unwrap_or(last_kf.pose);
        let ids = self.local_landmarks(map, &reference);
        let (result, matches) = pose_from_landmarks(map, &ids, &keypoints, k, &self.params)?;
        let mut pose = result.pose;
        let inliers = result.inlier_count();
        let new_keyframe = (inliers as f64) < self.params.keyframe_inlier_fraction * self.last_keyframe_inliers as f64
            || (pose.camera_center() - last_kf_center).norm() > self.params.keyframe_translation;
        let mut spawned = 0;
        if new_keyframe {
            let mut matched = vec![false; keypoints.len()];
            let mut observations = Vec::new();
            for ((q, l), inl) in matches.iter().zip(&result.inliers) {
                matched[*q] = true;
                if *inl {
                    observations.push((*q, *l));
                }
            }
            for (_, l) in &observations {
                map.landmarks.get_mut(l).unwrap().observation_count += 1;
            }
            map.keyframes.push(KeyFrame {
                id: frame_id,
                pose,
                keypoints,
                word_histogram: WordHistogram::new(),
                observations,
            });
            let idx = map.keyframes.len() - 1;
            if let Some(d) = depth {
                spawned = spawn_landmarks(map, idx, &matched, d, k, self.params.max_depth);
            }
            match bundle_adjust(map, self.params.ba_window, k) {
                Ok(_) | Err(SlamError::InsufficientObservations(_)) => {}
                Err(e) => return Err(e),
            }
            pose = map.keyframes[idx].pose;
            self.last_keyframe_inliers = inliers;
        }
        self.last_pose = Some(pose);
        Ok(TrackOutcome {
            pose,
            matches: matches.len(),
            inliers,
            new_keyframe,
            spawned,
        })
    }
}

/// Keyframes ranked by bag-of-words similarity to the query keypoints.
pub fn retrieve_candidates(map: &SparseMap, keypoints: &[Keypoint], n: usize) -> Result<Vec<(u64, f64)>, SlamError> {
    let vocab = map.vocabulary.as_ref().ok_or(SlamError::VocabularyMissing)?;
    let d: Vec<Descriptor> = keypoints.iter().map(|k| k.descriptor).collect();
    Ok(vocab.query(&vocab.histogram(&d), n))
}

/// Pose of a monocular frame from retrieval, landmark matching and PnP.
/// Failures are reported as [`SlamError::LocalizationFailed`].
pub fn localize_monocular(
    map: &SparseMap,
    keypoints: &[Keypoint],
    k: &Intrinsics,
    params: &TrackerParams,
) -> Result<Localized, SlamError> {
    if map.keyframes.is_empty() {
        return Err(SlamError::EmptyMap);
    }
    let ranked = retrieve_candidates(map, keypoints, params.retrieval_candidates)?;
    if ranked.is_empty() {
        return Err(fail(LocalizationFailure::RetrievalEmpty));
    }
    let candidates: Vec<u64> = ranked.iter().map(|r| r.0).collect();
    let mut ids = BTreeSet::new();
    for c in &candidates {
        if let Some(kf) = map.keyframe(*c) {
            ids.extend(kf.observations.iter().map(|(_, l)| *l));
        }
    }
    let ids: Vec<u64> = ids.into_iter().collect();
    let (result, matches) = pose_from_landmarks(map, &ids, keypoints, k, params)?;
    Ok(Localized {
        pose: result.pose,
        matches: matches.len(),
        inliers: result.inlier_count(),
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slam::features::{normalize, DESCRIPTOR_LEN};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap()
    }

    fn random_desc(rng: &mut impl Rng) -> Descriptor {
        let mut d = [0.0f32; DESCRIPTOR_LEN];
        d.iter_mut().for_each(|v| *v = rng.random::<f32>());
        normalize(&mut d);
        d
    }

    /// Points on the far wall z = 3 with distinct descriptors.
    struct World {
        points: Vec<(Vector3<f64>, Descriptor)>,
    }

    impl World {
        fn new(rng: &mut ChaCha8Rng, n: usize) -> Self {
            let points = (0..n)
                .map(|_| {
                    let p = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), 3.0 + rng.random_range(-0.5..0.5));
                    (p, random_desc(rng))
                })
                .collect();
            Self { points }
        }

        /// Keypoints and a depth image rendering the points as small
        /// fronto-parallel discs of constant depth.
        fn view(&self, pose: &Pose6D, k: &Intrinsics) -> (Vec<Keypoint>, DepthImage) {
            let mut depth = DepthImage::new(k.width as usize, k.height as usize);
            let mut kps = Vec::new();
            for (p, d) in &self.points {
                let pc = pose.transform(p);
                if pc.z <= 0.0 {
                    continue;
                }
                let px = k.project_camera(&pc);
                if px.x < 3.0 || px.y < 3.0 || px.x > k.width as f64 - 4.0 || px.y > k.height as f64 - 4.0 {
                    continue;
                }
                let (cx, cy) = (px.x.round() as usize, px.y.round() as usize);
                for y in cy - 1..=cy + 1 {
                    for x in cx - 1..=cx + 1 {
                        depth.set(x, y, pc.z);
                    }
                }
                kps.push(Keypoint {
                    pixel: px,
                    scale: 2.0,
                    orientation: 0.0,
                    response: 1.0,
                    descriptor: *d,
                });
            }
            (kps, depth)
        }
    }

    #[test]
    fn spawned_landmarks_reproject_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = World::new(&mut rng, 200);
        let pose = Pose6D::look_at(Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.0, 0.0, 3.0), -Vector3::y());
        let (kps, depth) = w.view(&pose, &k());
        let mut map = SparseMap::default();
        let mut t = Tracker::new(TrackerParams::default());
        let n = t.initialize(&mut map, 0, kps.clone(), &depth, pose, &k());
        assert!(n as f64 > 0.9 * kps.len() as f64 && n <= kps.len());
        for (kp, l) in &map.keyframes[0].observations {
            let px = crate::geometry::project(&map.landmarks[l].position, &pose, &k()).unwrap();
            assert!((px - map.keyframes[0].keypoints[*kp].pixel).norm() < 1e-6);
        }
        // Everything matched: nothing new.
        let before = map.landmarks.len();
        let all = vec![true; kps.len()];
        assert_eq!(spawn_landmarks(&mut map, 0, &all, &depth, &k(), 5.0), 0);
        assert_eq!(map.landmarks.len(), before);
        map.validate().unwrap();
    }

    #[test]
    fn single_unmatched_keypoint_spawns_one_landmark() {
        let mut map = SparseMap::default();
        let kp = Keypoint {
            pixel: Vector2::new(100.25, 80.5),
            scale: 2.0,
            orientation: 0.0,
            response: 1.0,
            descriptor: [0.0; DESCRIPTOR_LEN],
        };
        let mut depth = DepthImage::new(320, 240);
        depth.data.iter_mut().for_each(|d| *d = 2.0);
        map.keyframes.push(KeyFrame {
            id: 0,
            pose: Pose6D::identity(),
            keypoints: vec![kp.clone()],
            word_histogram: WordHistogram::new(),
            observations: Vec::new(),
        });
        assert_eq!(spawn_landmarks(&mut map, 0, &[false], &depth, &k(), 5.0), 1);
        let l = map.landmarks.values().next().unwrap();
        let expected = backproject(&kp.pixel, 2.0, &Pose6D::identity(), &k()).unwrap();
        assert!((l.position - expected).norm() < 1e-12);
        assert_eq!(l.observation_count, 1);
    }

    #[test]
    fn tracks_a_sequence_and_localizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = World::new(&mut rng, 600);
        let poses: Vec<Pose6D> = (0..25)
            .map(|i| {
                let eye = Vector3::new(-1.2 + 0.1 * i as f64, 0.05 * (i as f64 * 0.3).sin(), 0.0);
                Pose6D::look_at(eye, eye + Vector3::new(0.05, 0.0, 3.0), -Vector3::y())
            })
            .collect();
        let mut map = SparseMap::default();
        let mut t = Tracker::new(TrackerParams::default());
        let (kps, depth) = w.view(&poses[0], &k());
        t.initialize(&mut map, 0, kps, &depth, poses[0], &k());
        let mut keyframes = 1;
        for (i, truth) in poses.iter().enumerate().skip(1) {
            let (kps, depth) = w.view(truth, &k());
            let out = t.track_frame(&mut map, i as u64, kps, Some(&depth), &k()).unwrap();
            assert!((out.pose.camera_center() - truth.camera_center()).norm() < 1e-6, "frame {i}");
            keyframes += out.new_keyframe as usize;
        }
        assert_eq!(map.keyframes.len(), keyframes);
        assert!(keyframes > 2);
        map.validate().unwrap();
        map.build_vocabulary(8, 3, 0).unwrap();
        // Each keyframe retrieves itself first.
        for kf in &map.keyframes {
            let r = retrieve_candidates(&map, &kf.keypoints, 3).unwrap();
            assert_eq!(r[0].0, kf.id);
        }
        let query_pose = poses[12];
        let (kps, _) = w.view(&query_pose, &k());
        let loc = localize_monocular(&map, &kps, &k(), &TrackerParams::default()).unwrap();
        assert!((loc.pose.camera_center() - query_pose.camera_center()).norm() < 1e-2);
        // Nothing in view: no matches.
        let away = Pose6D::look_at(Vector3::zeros(), Vector3::new(0.0, 0.0, -3.0), -Vector3::y());
        let other = World::new(&mut rng, 300);
        let (kps, _) = other.view(&Pose6D::look_at(Vector3::zeros(), Vector3::new(0.0, 0.0, 3.0), -Vector3::y()), &k());
        let _ = away;
        match localize_monocular(&map, &kps, &k(), &TrackerParams::default()) {
            Err(SlamError::LocalizationFailed(LocalizationFailure::TooFewMatches { .. }))
            | Err(SlamError::LocalizationFailed(LocalizationFailure::RetrievalEmpty)) => {}
            other => panic!("unexpected {other:?}"),
        }
        let dir = tempfile::tempdir().unwrap();
        map.save(dir.path()).unwrap();
        let back = SparseMap::load(dir.path()).unwrap();
        assert_eq!(back.landmarks.len(), map.landmarks.len());
        assert_eq!(back.keyframes.len(), map.keyframes.len());
        for (a, b) in back.keyframes.iter().zip(&map.keyframes) {
            assert_eq!(a.word_histogram, b.word_histogram);
            assert_eq!(a.observations, b.observations);
        }
    }

    #[test]
    fn blurred_frame_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = World::new(&mut rng, 300);
        let pose = Pose6D::look_at(Vector3::zeros(), Vector3::new(0.0, 0.0, 3.0), -Vector3::y());
        let (kps, depth) = w.view(&pose, &k());
        let mut map = SparseMap::default();
        let mut t = Tracker::new(TrackerParams::default());
        t.initialize(&mut map, 0, kps.clone(), &depth, pose, &k());
        let few: Vec<Keypoint> = kps.into_iter().take(3).collect();
        assert!(matches!(
            t.track_frame(&mut map, 1, few, None, &k()),
            Err(SlamError::LocalizationFailed(LocalizationFailure::TooFewMatches { .. }))
        ));
    }
}

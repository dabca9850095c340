//! Detection quality, region overlap and gaze attention measures.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::Vector2;
use thiserror::Error;

use crate::gaze::FixationHit;
use crate::polygon;
use crate::roi::Roi3D;
use crate::surface::TriangleMesh;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("polygon has zero area or is not convex")]
    DegeneratePolygon,
    #[error("empty denominator: {0}")]
    EmptyDenominator(&'static str),
    #[error("ground-truth frame set is empty")]
    EmptyGroundTruth,
    #[error("roi references triangle {0} outside the mesh")]
    MeshMismatch(usize),
    #[error("timestamps not strictly increasing at sample {0}")]
    NonMonotoneTimestamps(usize),
}

/// Intersection over union of two convex polygons.
pub fn spatial_overlap_2d(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> Result<f64, MetricsError> {
    for p in [a, b] {
        if !polygon::is_convex(p) || polygon::area(p) <= 0.0 {
            return Err(MetricsError::DegeneratePolygon);
        }
    }
    Ok(polygon::convex_iou(a, b))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub overlaps: Vec<f64>,
    /// Frames with at least one true positive.
    pub tp_frames: BTreeSet<u64>,
}

impl MatchResult {
    pub fn detections(&self) -> usize {
        self.true_positives + self.false_positives
    }

    pub fn ground_truth(&self) -> usize {
        self.true_positives + self.false_negatives
    }

    /// Mean and population standard deviation of the TP overlaps.
    pub fn overlap_stats(&self) -> Option<(f64, f64)> {
        if self.overlaps.is_empty() {
            return None;
        }
        let n = self.overlaps.len() as f64;
        let mean = self.overlaps.iter().sum::<f64>() / n;
        let var = self.overlaps.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }
}

pub type FramePolygons = BTreeMap<u64, Vec<Vec<Vector2<f64>>>>;

/// Per frame, greedy assignment in decreasing overlap order; a pair is a
/// true positive when its overlap reaches `threshold`.
pub fn match_detections(detections: &FramePolygons, ground_truth: &FramePolygons, threshold: f64) -> MatchResult {
    let mut r = MatchResult::default();
    let frames: BTreeSet<u64> = detections.keys().chain(ground_truth.keys()).copied().collect();
    let empty = Vec::new();
    for f in frames {
        let det = detections.get(&f).unwrap_or(&empty);
        let gt = ground_truth.get(&f).unwrap_or(&empty);
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (i, d) in det.iter().enumerate() {
            for (j, g) in gt.iter().enumerate() {
                if let Ok(o) = spatial_overlap_2d(d, g) {
                    if o >= threshold {
                        pairs.push((o, i, j));
                    }
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let (mut used_d, mut used_g) = (vec![false; det.len()], vec![false; gt.len()]);
        let mut tp = 0;
        for (o, i, j) in pairs {
            if !used_d[i] && !used_g[j] {
                used_d[i] = true;
                used_g[j] = true;
                r.overlaps.push(o);
                tp += 1;
            }
        }
        if tp > 0 {
            r.tp_frames.insert(f);
        }
        r.true_positives += tp;
        r.false_positives += det.len() - tp;
        r.false_negatives += gt.len() - tp;
    }
    r
}

pub fn precision(tp: usize, fp: usize) -> Result<f64, MetricsError> {
    if tp + fp == 0 {
        return Err(MetricsError::EmptyDenominator("tp + fp"));
    }
    Ok(tp as f64 / (tp + fp) as f64)
}

pub fn recall(tp: usize, fn_: usize) -> Result<f64, MetricsError> {
    if tp + fn_ == 0 {
        return Err(MetricsError::EmptyDenominator("tp + fn"));
    }
    Ok(tp as f64 / (tp + fn_) as f64)
}

pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> Result<(f64, f64), MetricsError> {
    Ok((precision(tp, fp)?, recall(tp, fn_)?))
}

pub fn temporal_coverage(gt_frames: &BTreeSet<u64>, tp_frames: &BTreeSet<u64>) -> Result<f64, MetricsError> {
    if gt_frames.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    Ok(gt_frames.intersection(tp_frames).count() as f64 / gt_frames.len() as f64)
}

/// Area-weighted Jaccard index of two triangle sets. Two empty sets count
/// as identical.
pub fn overlap_3d(a: &Roi3D, b: &Roi3D, mesh: &TriangleMesh) -> Result<f64, MetricsError> {
    let n = mesh.triangles.len();
    if let Some(t) = a.triangle_ids.iter().chain(&b.triangle_ids).find(|t| **t >= n) {
        return Err(MetricsError::MeshMismatch(*t));
    }
    let inter: f64 = a.triangle_ids.intersection(&b.triangle_ids).map(|t| mesh.triangle_area(*t)).sum();
    let union: f64 = a.triangle_ids.union(&b.triangle_ids).map(|t| mesh.triangle_area(*t)).sum();
    if union <= 0.0 {
        return Ok(if a.triangle_ids == b.triangle_ids { 1.0 } else { 0.0 });
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

pub fn aoi_hits(hits: &[FixationHit], roi: &Roi3D) -> Vec<FixationHit> {
    hits.iter()
        .filter(|h| roi.triangle_ids.contains(&(h.triangle_id as usize)))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DwellRecord {
    pub roi_id: u32,
    pub entry: f64,
    pub exit: f64,
    /// Number of hit samples in the visit.
    pub samples: usize,
}

impl DwellRecord {
    pub fn duration(&self) -> f64 {
        self.exit - self.entry
    }
}

/// Maximal runs of consecutive hit samples. A run of `n` samples starting
/// at `t` spans `[t, t + n·period)`; this also closes a run that reaches
/// the last sample. Runs shorter than `min_duration` are dropped.
pub fn compute_dwells(
    samples: &[(f64, bool)],
    roi_id: u32,
    period: f64,
    min_duration: f64,
) -> Result<Vec<DwellRecord>, MetricsError> {
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[1].0 > w[0].0) {
            return Err(MetricsError::NonMonotoneTimestamps(i + 1));
        }
    }
    let mut out = Vec::new();
    let mut run: Option<(f64, usize)> = None;
    let close = |run: Option<(f64, usize)>, out: &mut Vec<DwellRecord>| {
        if let Some((entry, n)) = run {
            let d = DwellRecord {
                roi_id,
                entry,
                exit: entry + n as f64 * period,
                samples: n,
            };
            if d.duration() >= min_duration {
                out.push(d);
            }
        }
    };
    for (t, hit) in samples {
        match (hit, run) {
            (true, None) => run = Some((*t, 1)),
            (true, Some((e, n))) => run = Some((e, n + 1)),
            (false, Some(_)) => {
                close(run, &mut out);
                run = None;
            }
            (false, None) => {}
        }
    }
    close(run, &mut out);
    Ok(out)
}

/// `"1512 (79.45%)"`.
pub fn format_ratio(count: usize, total: usize) -> String {
    if total == 0 {
        return format!("{count} (n/a)");
    }
    format!("{count} ({:.2}%)", 100.0 * count as f64 / total as f64)
}

/// Counts of dwell durations in bins of `bin_width` seconds, from zero up
/// to the longest dwell.
pub fn dwell_histogram(dwells: &[DwellRecord], bin_width: f64) -> Vec<(f64, usize)> {
    let Some(max) = dwells.iter().map(|d| d.duration()).reduce(f64::max) else {
        return Vec::new();
    };
    let bins = ((max / bin_width).floor() as usize) + 1;
    let mut counts = vec![0usize; bins];
    for d in dwells {
        // Nudge so that an exact multiple of the bin width (up to rounding)
        // falls in the bin it starts.
        let b = ((d.duration() / bin_width) + 1e-9).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    counts.into_iter().enumerate().map(|(i, c)| (i as f64 * bin_width, c)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionStats {
    pub ground_truth: usize,
    pub detections: usize,
    pub true_positives: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub overlap: Option<(f64, f64)>,
    pub temporal_coverage: Option<f64>,
}

impl DetectionStats {
    pub fn from_match(m: &MatchResult, gt_frames: &BTreeSet<u64>) -> Self {
        Self {
            ground_truth: m.ground_truth(),
            detections: m.detections(),
            true_positives: m.true_positives,
            precision: precision(m.true_positives, m.false_positives).ok(),
            recall: recall(m.true_positives, m.false_negatives).ok(),
            overlap: m.overlap_stats(),
            temporal_coverage: temporal_coverage(gt_frames, &m.tp_frames).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiReport {
    pub roi_id: u32,
    pub detection: Option<DetectionStats>,
    pub area: f64,
    pub overlap_3d_automatic: Option<f64>,
    pub overlap_3d_ground_truth_2d: Option<f64>,
    pub aoi_hits: usize,
    pub dwells: Vec<DwellRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationRow {
    pub session: String,
    pub localized: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub localization: Vec<LocalizationRow>,
    pub rois: Vec<RoiReport>,
    pub fixation_hits: usize,
    pub saliency_total: f64,
    pub dwell_bin_width: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    /// Totals over ROIs with detection statistics.
    pub fn detection_totals(&self) -> Option<DetectionStats> {
        let s: Vec<&DetectionStats> = self.rois.iter().filter_map(|r| r.detection.as_ref()).collect();
        if s.is_empty() {
            return None;
        }
        let gt: usize = s.iter().map(|d| d.ground_truth).sum();
        let det: usize = s.iter().map(|d| d.detections).sum();
        let tp: usize = s.iter().map(|d| d.true_positives).sum();
        Some(DetectionStats {
            ground_truth: gt,
            detections: det,
            true_positives: tp,
            precision: precision(tp, det - tp).ok(),
            recall: recall(tp, gt - tp).ok(),
            overlap: None,
            temporal_coverage: None,
        })
    }

    /// Key-value blocks: localization, one block per ROI, totals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.localization {
            let _ = writeln!(s, "[localization {}]", l.session);
            let _ = writeln!(s, "frames = {}", l.total);
            let _ = writeln!(s, "localized = {}\n", format_ratio(l.localized, l.total));
        }
        for r in &self.rois {
            let _ = writeln!(s, "[roi {}]", r.roi_id);
            if let Some(d) = &r.detection {
                let _ = writeln!(s, "ground_truth = {}", d.ground_truth);
                let _ = writeln!(s, "detections = {}", d.detections);
                let _ = writeln!(s, "true_positives = {}", d.true_positives);
                let _ = writeln!(s, "precision = {}", opt(d.precision));
                let _ = writeln!(s, "recall = {}", opt(d.recall));
                let _ = writeln!(s, "spatial_overlap_mean = {}", opt(d.overlap.map(|o| o.0)));
                let _ = writeln!(s, "spatial_overlap_std = {}", opt(d.overlap.map(|o| o.1)));
                let _ = writeln!(s, "temporal_coverage = {}", opt(d.temporal_coverage));
            }
            let _ = writeln!(s, "area_m2 = {:.6}", r.area);
            let _ = writeln!(s, "overlap_3d_automatic = {}", opt(r.overlap_3d_automatic));
            let _ = writeln!(s, "overlap_3d_ground_truth_2d = {}", opt(r.overlap_3d_ground_truth_2d));
            let _ = writeln!(s, "aoi_hits = {}", r.aoi_hits);
            let _ = writeln!(s, "dwells = {}", r.dwells.len());
            let total = r.dwells.iter().fold(0.0, |a, d| a + d.duration());
            let longest = r.dwells.iter().map(|d| d.duration()).fold(0.0, f64::max);
            let _ = writeln!(s, "dwell_total_ms = {:.1}", total * 1e3);
            let _ = writeln!(s, "dwell_longest_ms = {:.1}\n", longest * 1e3);
        }
        if let Some(t) = self.detection_totals() {
            let _ = writeln!(s, "[detection totals]");
            let _ = writeln!(s, "ground_truth = {}", t.ground_truth);
            let _ = writeln!(s, "detections = {}", t.detections);
            let _ = writeln!(s, "true_positives = {}", t.true_positives);
            let _ = writeln!(s, "precision = {}", opt(t.precision));
            let _ = writeln!(s, "recall = {}\n", opt(t.recall));
        }
        let _ = writeln!(s, "[gaze]");
        let _ = writeln!(s, "fixation_hits = {}", self.fixation_hits);
        let _ = writeln!(s, "saliency_total = {:.6}", self.saliency_total);
        s
    }

    /// `(file name, contents)` for the per-table CSV exports.
    pub fn csv_exports(&self) -> Vec<(String, String)> {
        let mut loc = String::from("session,frames,localized,ratio\n");
        for l in &self.localization {
            let ratio = if l.total == 0 { 0.0 } else { l.localized as f64 / l.total as f64 };
            let _ = writeln!(loc, "{},{},{},{:.4}", l.session, l.total, l.localized, ratio);
        }
        let mut det = String::from("roi_id,ground_truth,detections,true_positives,precision,recall,overlap_mean,overlap_std,temporal_coverage\n");
        let mut roi3d = String::from("roi_id,area_m2,overlap_automatic,overlap_ground_truth_2d\n");
        let mut dw = String::from("roi_id,entry,exit,duration_ms\n");
        let mut all = Vec::new();
        for r in &self.rois {
            if let Some(d) = &r.detection {
                let _ = writeln!(
                    det,
                    "{},{},{},{},{},{},{},{},{}",
                    r.roi_id,
                    d.ground_truth,
                    d.detections,
                    d.true_positives,
                    opt(d.precision),
                    opt(d.recall),
                    opt(d.overlap.map(|o| o.0)),
                    opt(d.overlap.map(|o| o.1)),
                    opt(d.temporal_coverage)
                );
            }
            let _ = writeln!(
                roi3d,
                "{},{:.6},{},{}",
                r.roi_id,
                r.area,
                opt(r.overlap_3d_automatic),
                opt(r.overlap_3d_ground_truth_2d)
            );
            for d in &r.dwells {
                let _ = writeln!(dw, "{},{:.6},{:.6},{:.1}", r.roi_id, d.entry, d.exit, d.duration() * 1e3);
            }
            all.extend_from_slice(&r.dwells);
        }
        let mut hist = String::from("bin_ms,count\n");
        if self.dwell_bin_width > 0.0 {
            for (b, c) in dwell_histogram(&all, self.dwell_bin_width) {
                let _ = writeln!(hist, "{:.1},{c}", b * 1e3);
            }
        }
        vec![
            ("localization.csv".into(), loc),
            ("detection.csv".into(), det),
            ("roi3d.csv".into(), roi3d),
            ("dwells.csv".into(), dw),
            ("dwell_histogram.csv".into(), hist),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn sq(x: f64, y: f64, s: f64) -> Vec<Vector2<f64>> {
        vec![
            Vector2::new(x, y),
            Vector2::new(x + s, y),
            Vector2::new(x + s, y + s),
            Vector2::new(x, y + s),
        ]
    }

    #[test]
    fn overlap_2d() {
        assert_eq!(spatial_overlap_2d(&sq(0.0, 0.0, 1.0), &sq(0.0, 0.0, 1.0)), Ok(1.0));
        assert_eq!(spatial_overlap_2d(&sq(0.0, 0.0, 1.0), &sq(2.0, 0.0, 1.0)), Ok(0.0));
        let o = spatial_overlap_2d(&sq(0.0, 0.0, 1.0), &sq(0.5, 0.5, 1.0)).unwrap();
        assert!((o - 0.25 / 1.75).abs() < 1e-12);
        let flat = vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(2.0, 0.0)];
        assert_eq!(spatial_overlap_2d(&flat, &sq(0.0, 0.0, 1.0)), Err(MetricsError::DegeneratePolygon));
    }

    #[test]
    fn table_rows() {
        let cases = [(19, 19, 21, 1.00, 0.90), (86, 184, 87, 0.47, 0.99), (70, 82, 95, 0.85, 0.74)];
        for (tp, det, gt, p, r) in cases {
            let (pp, rr) = precision_recall(tp, det - tp, gt - tp).unwrap();
            assert_eq!(format!("{pp:.2}"), format!("{p:.2}"));
            assert_eq!(format!("{rr:.2}"), format!("{r:.2}"));
        }
        let (p, r) = precision_recall(175, 110, 28).unwrap();
        assert_eq!((format!("{p:.2}"), format!("{r:.2}")), ("0.61".into(), "0.86".into()));
        assert_eq!(precision(0, 5), Ok(0.0));
        assert!(matches!(precision_recall(0, 0, 3), Err(MetricsError::EmptyDenominator(_))));
    }

    #[test]
    fn ratios() {
        assert_eq!(format_ratio(1512, 1903), "1512 (79.45%)");
        assert_eq!(format_ratio(1088, 1306), "1088 (83.31%)");
    }

    #[test]
    fn matching() {
        let mut det = FramePolygons::new();
        let mut gt = FramePolygons::new();
        det.insert(0, vec![sq(0.0, 0.0, 1.0), sq(5.0, 5.0, 1.0)]);
        gt.insert(0, vec![sq(0.1, 0.0, 1.0)]);
        gt.insert(1, vec![sq(0.0, 0.0, 1.0)]);
        let m = match_detections(&det, &gt, 0.5);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 1, 1));
        assert!((m.overlaps[0] - 0.9 / 1.1).abs() < 1e-12);
        let same = match_detections(&gt, &gt, 0.5);
        assert_eq!(same.overlap_stats(), Some((1.0, 0.0)));
        assert_eq!(precision_recall(same.true_positives, same.false_positives, same.false_negatives), Ok((1.0, 1.0)));
    }

    #[test]
    fn coverage() {
        let gt: BTreeSet<u64> = (0..100).collect();
        let tp: BTreeSet<u64> = (0..100).filter(|f| f % 100 < 37).collect();
        assert_eq!(temporal_coverage(&gt, &tp), Ok(0.37));
        assert_eq!(temporal_coverage(&gt, &gt), Ok(1.0));
        assert_eq!(temporal_coverage(&gt, &BTreeSet::new()), Ok(0.0));
        assert_eq!(temporal_coverage(&BTreeSet::new(), &gt), Err(MetricsError::EmptyGroundTruth));
    }

    /// Unit-square cells split in two triangles each, in a row.
    fn strip(cells: usize) -> TriangleMesh {
        let mut p = Vec::new();
        for i in 0..=cells {
            p.push(Vector3::new(i as f64, 0.0, 0.0));
            p.push(Vector3::new(i as f64, 1.0, 0.0));
        }
        let mut t = Vec::new();
        for i in 0..cells as u32 {
            t.push([2 * i, 2 * i + 2, 2 * i + 1]);
            t.push([2 * i + 1, 2 * i + 2, 2 * i + 3]);
        }
        TriangleMesh::from_positions(p, t)
    }

    #[test]
    fn overlap_of_triangle_sets() {
        let m = strip(4);
        let a = Roi3D::new(0, [0, 1, 2, 3].into(), &m).unwrap();
        let b = Roi3D::new(1, [2, 3, 4, 5].into(), &m).unwrap();
        assert!((overlap_3d(&a, &b, &m).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(overlap_3d(&a, &a, &m), Ok(1.0));
        let c = Roi3D::new(2, [6, 7].into(), &m).unwrap();
        assert_eq!(overlap_3d(&a, &c, &m), Ok(0.0));
        let small = strip(1);
        assert_eq!(overlap_3d(&a, &b, &small), Err(MetricsError::MeshMismatch(2)));
    }

    fn hit(t: f64, tri: u32) -> FixationHit {
        FixationHit {
            timestamp: t,
            triangle_id: tri,
            point: Vector3::zeros(),
            distance: 1.0,
        }
    }

    #[test]
    fn aoi() {
        let m = strip(2);
        let roi = Roi3D::new(0, [1].into(), &m).unwrap();
        assert!(aoi_hits(&[], &roi).is_empty());
        let hits = vec![hit(0.0, 1), hit(0.1, 1)];
        assert_eq!(aoi_hits(&hits, &roi).len(), 2);
        let mixed = vec![hit(0.0, 0), hit(0.1, 1), hit(0.2, 2), hit(0.3, 1)];
        let sel = aoi_hits(&mixed, &roi);
        assert_eq!(sel.iter().map(|h| h.timestamp).collect::<Vec<_>>(), vec![0.1, 0.3]);
    }

    #[test]
    fn dwell_arithmetic() {
        let period = 1.0 / 30.0;
        let s: Vec<(f64, bool)> = (0..22).map(|i| (i as f64 * period, true)).collect();
        let d = compute_dwells(&s, 1, period, 0.0).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[0].duration() * 1e3 - 733.3).abs() < 0.1);
        let s: Vec<(f64, bool)> = [true, true, false, true]
            .iter()
            .enumerate()
            .map(|(i, h)| (i as f64 * period, *h))
            .collect();
        let all = compute_dwells(&s, 1, period, 0.0).unwrap();
        assert_eq!(all.len(), 2);
        let d = compute_dwells(&s, 1, period, 0.035).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[0].duration() - 2.0 * period).abs() < 1e-12);
        assert!(compute_dwells(&[], 1, period, 0.0).unwrap().is_empty());
        assert_eq!(
            compute_dwells(&[(0.0, true), (0.0, true)], 1, period, 0.0),
            Err(MetricsError::NonMonotoneTimestamps(1))
        );
    }

    #[test]
    fn histogram_bins() {
        let period = 1.0 / 30.0;
        let d = |n: usize| DwellRecord {
            roi_id: 0,
            entry: 0.0,
            exit: n as f64 * period,
            samples: n,
        };
        let h = dwell_histogram(&[d(1), d(1), d(3), d(4)], period);
        assert_eq!(h.iter().map(|x| x.1).collect::<Vec<_>>(), vec![0, 2, 0, 1, 1]);
    }

    #[test]
    fn report_text_has_blocks() {
        let r = MetricsReport {
            localization: vec![LocalizationRow {
                session: "a".into(),
                localized: 1512,
                total: 1903,
            }],
            rois: vec![RoiReport {
                roi_id: 1,
                detection: Some(DetectionStats {
                    ground_truth: 21,
                    detections: 19,
                    true_positives: 19,
                    precision: Some(1.0),
                    recall: Some(19.0 / 21.0),
                    overlap: Some((0.87, 0.02)),
                    temporal_coverage: Some(0.5),
                }),
                area: 0.1,
                overlap_3d_automatic: Some(0.8),
                overlap_3d_ground_truth_2d: Some(0.9),
                aoi_hits: 3,
                dwells: vec![],
            }],
            fixation_hits: 10,
            saliency_total: 10.0,
            dwell_bin_width: 1.0 / 30.0,
        };
        let t = r.to_text();
        assert!(t.contains("localized = 1512 (79.45%)"));
        assert!(t.contains("[roi 1]"));
        assert!(t.contains("recall = 0.9048"));
        assert_eq!(r.csv_exports().len(), 5);
    }

    proptest! {
        #[test]
        fn precision_recall_bounded(tp in 0usize..1000, fp in 0usize..1000, fn_ in 0usize..1000) {
            if let Ok((p, r)) = precision_recall(tp, fp, fn_) {
                prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn dwells_partition_hits(flags in proptest::collection::vec(any::<bool>(), 0..200)) {
            let period = 1.0 / 30.0;
            let s: Vec<(f64, bool)> = flags.iter().enumerate().map(|(i, h)| (i as f64 * period, *h)).collect();
            let d = compute_dwells(&s, 0, period, 0.0).unwrap();
            let samples: usize = d.iter().map(|x| x.samples).sum();
            prop_assert_eq!(samples, flags.iter().filter(|h| **h).count());
            for w in d.windows(2) {
                prop_assert!(w[0].exit <= w[1].entry + 1e-12);
            }
            prop_assert!(d.iter().all(|x| x.exit > x.entry));
        }

        #[test]
        fn greedy_tp_bounded(nd in 0usize..5, ng in 0usize..5, shift in 0.0..1.5f64) {
            let det: FramePolygons = [(0u64, (0..nd).map(|i| sq(i as f64 * shift, 0.0, 1.0)).collect())].into();
            let gt: FramePolygons = [(0u64, (0..ng).map(|i| sq(i as f64 * 0.7, 0.0, 1.0)).collect())].into();
            let m = match_detections(&det, &gt, 0.5);
            prop_assert!(m.true_positives <= nd.min(ng));
            prop_assert_eq!(m.detections(), nd);
            prop_assert_eq!(m.ground_truth(), ng);
        }
    }
}

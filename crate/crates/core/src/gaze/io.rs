//! CSV files for gaze samples, fixation hits and saliency.

use std::path::Path;

use nalgebra::{Vector2, Vector3};

use super::{FixationHit, GazeSample, SaliencyMap};
use crate::io::{csv_rows, read_text, write_text, FormatError};
use crate::surface::ply::{write_colored, PlyFormat};
use crate::surface::TriangleMesh;

pub const GAZE_HEADER: &str = "timestamp_s,u_px,v_px,valid";
pub const HITS_HEADER: &str = "timestamp_s,triangle_id,x,y,z,distance_m";
pub const SALIENCY_HEADER: &str = "triangle_id,weight";

pub fn write_gaze(path: &Path, samples: &[GazeSample]) -> Result<(), FormatError> {
    let mut s = format!("{GAZE_HEADER}\n");
    for g in samples {
        s.push_str(&format!(
            "{},{},{},{}\n",
            g.timestamp, g.pixel.x, g.pixel.y, g.valid as u8
        ));
    }
    write_text(path, &s)
}

/// Reads a gaze session; timestamps must be strictly increasing.
pub fn read_gaze(path: &Path) -> Result<Vec<GazeSample>, FormatError> {
    let text = read_text(path)?;
    let mut out: Vec<GazeSample> = Vec::new();
    for row in csv_rows(path, &text) {
        row.expect_len(4)?;
        let valid = match row.cells[3] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(FormatError::parse(path, row.line, format!("bad valid flag {other:?}")))
            }
        };
        let g = GazeSample {
            timestamp: row.get(0)?,
            pixel: Vector2::new(row.get(1)?, row.get(2)?),
            valid,
        };
        if let Some(prev) = out.last() {
            if g.timestamp <= prev.timestamp {
                return Err(FormatError::parse(path, row.line, "timestamps must increase"));
            }
        }
        out.push(g);
    }
    Ok(out)
}

pub fn write_hits(path: &Path, hits: &[FixationHit]) -> Result<(), FormatError> {
    let mut s = format!("{HITS_HEADER}\n");
    for h in hits {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.timestamp, h.triangle_id, h.point.x, h.point.y, h.point.z, h.distance
        ));
    }
    write_text(path, &s)
}

pub fn read_hits(path: &Path) -> Result<Vec<FixationHit>, FormatError> {
    let text = read_text(path)?;
    csv_rows(path, &text)
        .into_iter()
        .map(|row| {
            row.expect_len(6)?;
            Ok(FixationHit {
                timestamp: row.get(0)?,
                triangle_id: row.get(1)?,
                point: Vector3::new(row.get(2)?, row.get(3)?, row.get(4)?),
                distance: row.get(5)?,
            })
        })
        .collect()
}

pub fn write_saliency(path: &Path, map: &SaliencyMap) -> Result<(), FormatError> {
    let mut s = format!("# total_hits={} sigma={}\n{SALIENCY_HEADER}\n", map.total_hits, map.sigma);
    for (t, w) in map.weights.iter().enumerate() {
        s.push_str(&format!("{t},{w}\n"));
    }
    write_text(path, &s)
}

/// Dense per-triangle weights; ids absent from the file read as zero.
pub fn read_saliency(path: &Path, triangle_count: usize) -> Result<Vec<f64>, FormatError> {
    let text = read_text(path)?;
    let mut w = vec![0.0; triangle_count];
    for row in csv_rows(path, &text) {
        row.expect_len(2)?;
        let t: usize = row.get(0)?;
        if t >= triangle_count {
            return Err(FormatError::parse(path, row.line, "triangle id out of range"));
        }
        w[t] = row.get(1)?;
    }
    Ok(w)
}

/// Blue, cyan, green, yellow, red for `x` in `[0, 1]`.
pub fn heat_ramp(x: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let x = if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 };
    let f = x * 4.0;
    let i = (f.floor() as usize).min(3);
    let t = f - i as f64;
    let mut c = [0u8; 3];
    for k in 0..3 {
        let v = STOPS[i][k] * (1.0 - t) + STOPS[i + 1][k] * t;
        c[k] = (v * 255.0).round() as u8;
    }
    c
}

/// Mesh with vertex colors from the mean weight of incident triangles,
/// scaled by the maximum vertex value.
pub fn write_saliency_ply(
    path: &Path,
    mesh: &TriangleMesh,
    weights: &[f64],
    format: PlyFormat,
) -> Result<(), FormatError> {
    let mut sum = vec![0.0; mesh.vertices.len()];
    let mut cnt = vec![0usize; mesh.vertices.len()];
    for (tri, w) in mesh.triangles.iter().zip(weights) {
        for i in tri {
            sum[*i as usize] += w;
            cnt[*i as usize] += 1;
        }
    }
    let v: Vec<f64> = sum
        .iter()
        .zip(&cnt)
        .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
        .collect();
    let max = v.iter().cloned().fold(0.0, f64::max);
    let colors: Vec<[u8; 3]> = v
        .iter()
        .map(|x| heat_ramp(if max > 0.0 { x / max } else { 0.0 }))
        .collect();
    let positions: Vec<_> = mesh.vertices.iter().map(|v| v.position).collect();
    write_colored(path, &positions, &colors, &mesh.triangles, &["saliency heat ramp".into()], format)
}

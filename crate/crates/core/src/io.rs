//! Plain-text file helpers: headed CSV tables and `key=value` files, plus the
//! pose and intrinsics formats built on them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose6D};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl FormatError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|e| FormatError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| FormatError::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| FormatError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| FormatError::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

/// One data row of a CSV file, with its 1-based line number for errors.
pub struct CsvRow<'a> {
    pub path: &'a Path,
    pub line: usize,
    pub cells: Vec<&'a str>,
}

impl CsvRow<'_> {
    pub fn get<T: FromStr>(&self, idx: usize) -> Result<T, FormatError> {
        let cell = self
            .cells
            .get(idx)
            .ok_or_else(|| FormatError::parse(self.path, self.line, format!("missing column {idx}")))?;
        cell.parse::<T>().map_err(|_| {
            FormatError::parse(self.path, self.line, format!("cannot parse column {idx}: {cell:?}"))
        })
    }

    pub fn expect_len(&self, n: usize) -> Result<(), FormatError> {
        if self.cells.len() != n {
            return Err(FormatError::parse(
                self.path,
                self.line,
                format!("expected {n} columns, found {}", self.cells.len()),
            ));
        }
        Ok(())
    }
}

/// Splits CSV text into rows. A first content line whose first cell is not
/// numeric is treated as a header and skipped; blank lines and `#` comments are ignored.
pub fn csv_rows<'a>(path: &'a Path, text: &'a str) -> Vec<CsvRow<'a>> {
    let mut rows = Vec::new();
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if std::mem::take(&mut first) && cells[0].parse::<f64>().is_err() {
            continue;
        }
        rows.push(CsvRow {
            path,
            line: i + 1,
            cells,
        });
    }
    rows
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_key_values(path: &Path, text: &str) -> Result<BTreeMap<String, String>, FormatError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::parse(path, i + 1, "expected key=value"))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn kv_get<T: FromStr>(
    path: &Path,
    map: &BTreeMap<String, String>,
    key: &str,
) -> Result<T, FormatError> {
    let v = map
        .get(key)
        .ok_or_else(|| FormatError::parse(path, 0, format!("missing key {key}")))?;
    v.parse::<T>()
        .map_err(|_| FormatError::parse(path, 0, format!("invalid value for {key}: {v:?}")))
}

pub const POSE_HEADER: &str = "frame_id,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz";

pub fn format_poses(poses: &[(u64, Pose6D)]) -> String {
    let mut s = String::from(POSE_HEADER);
    s.push('\n');
    for (id, p) in poses {
        let _ = write!(s, "{id}");
        for r in 0..3 {
            for c in 0..3 {
                let _ = write!(s, ",{}", p.rotation[(r, c)]);
            }
        }
        for i in 0..3 {
            let _ = write!(s, ",{}", p.translation[i]);
        }
        s.push('\n');
    }
    s
}

pub fn write_poses(path: &Path, poses: &[(u64, Pose6D)]) -> Result<(), FormatError> {
    write_text(path, &format_poses(poses))
}

pub fn read_poses(path: &Path) -> Result<Vec<(u64, Pose6D)>, FormatError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for row in csv_rows(path, &text) {
        row.expect_len(13)?;
        let id: u64 = row.get(0)?;
        let mut r = Matrix3::zeros();
        for i in 0..9 {
            r[(i / 3, i % 3)] = row.get(1 + i)?;
        }
        let t = Vector3::new(row.get(10)?, row.get(11)?, row.get(12)?);
        let pose = Pose6D::new(r, t)
            .map_err(|e| FormatError::parse(path, row.line, e.to_string()))?;
        out.push((id, pose));
    }
    Ok(out)
}

pub fn format_intrinsics(k: &Intrinsics) -> String {
    format!(
        "fx={}\nfy={}\ncx={}\ncy={}\nwidth={}\nheight={}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    )
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<(), FormatError> {
    write_text(path, &format_intrinsics(k))
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, FormatError> {
    let text = read_text(path)?;
    let kv = parse_key_values(path, &text)?;
    Intrinsics::new(
        kv_get(path, &kv, "fx")?,
        kv_get(path, &kv, "fy")?,
        kv_get(path, &kv, "cx")?,
        kv_get(path, &kv, "cy")?,
        kv_get(path, &kv, "width")?,
        kv_get(path, &kv, "height")?,
    )
    .map_err(|e| FormatError::parse(path, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.csv");
        let poses = vec![
            (0, Pose6D::identity()),
            (
                7,
                Pose6D::from_axis_angle(Vector3::new(0.1, -0.7, 0.3), Vector3::new(1.5, -2.0, 0.25)),
            ),
        ];
        write_poses(&path, &poses).unwrap();
        assert_eq!(read_poses(&path).unwrap(), poses);
    }

    #[test]
    fn intrinsics_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.txt");
        let k = Intrinsics::new(285.5, 286.0, 159.5, 119.5, 320, 240).unwrap();
        write_intrinsics(&path, &k).unwrap();
        assert_eq!(read_intrinsics(&path).unwrap(), k);
        write_text(&path, "fx=1\nfy=1\n").unwrap();
        assert!(matches!(read_intrinsics(&path), Err(FormatError::Parse { .. })));
    }

    #[test]
    fn malformed_pose_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.csv");
        write_text(&path, &format!("{POSE_HEADER}\n1,2,3\n")).unwrap();
        match read_poses(&path) {
            Err(FormatError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}

//! PLY mesh files: `x y z` as double, `red green blue` as uchar, faces as
//! `list uchar int`. Observation counts go to a sibling CSV named in a
//! header comment.

use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use super::{MeshVertex, TriangleMesh, UNOBSERVED_COLOR};
use crate::io::{csv_rows, read_text, write_bytes, write_text, FormatError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    #[default]
    BinaryLittleEndian,
    Ascii,
}

const COUNTS_COMMENT: &str = "observation_counts";

pub fn color_to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Path of the observation-count file written next to `ply`.
pub fn counts_path(ply: &Path) -> PathBuf {
    let stem = ply.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh");
    ply.with_file_name(format!("{stem}_observations.csv"))
}

fn header(format: PlyFormat, comments: &[String], nv: usize, nf: usize) -> String {
    let fmt = match format {
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
        PlyFormat::Ascii => "ascii",
    };
    let mut h = format!("ply\nformat {fmt} 1.0\n");
    for c in comments {
        h.push_str(&format!("comment {c}\n"));
    }
    h.push_str(&format!(
        "element vertex {nv}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {nf}\nproperty list uchar int vertex_indices\nend_header\n"
    ));
    h
}

/// Writes positions, 8-bit colors and faces.
pub fn write_colored(
    path: &Path,
    positions: &[Vector3<f64>],
    colors: &[[u8; 3]],
    triangles: &[[u32; 3]],
    comments: &[String],
    format: PlyFormat,
) -> Result<(), FormatError> {
    let mut out = header(format, comments, positions.len(), triangles.len()).into_bytes();
    match format {
        PlyFormat::BinaryLittleEndian => {
            for (p, c) in positions.iter().zip(colors) {
                for x in p.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out.extend_from_slice(c);
            }
            for t in triangles {
                out.push(3);
                for i in t {
                    out.extend_from_slice(&(*i as i32).to_le_bytes());
                }
            }
        }
        PlyFormat::Ascii => {
            let mut s = String::new();
            for (p, c) in positions.iter().zip(colors) {
                s.push_str(&format!("{} {} {} {} {} {}\n", p.x, p.y, p.z, c[0], c[1], c[2]));
            }
            for t in triangles {
                s.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
            }
            out.extend_from_slice(s.as_bytes());
        }
    }
    write_bytes(path, &out)
}

/// Writes the mesh and its observation counts.
pub fn write_mesh(path: &Path, mesh: &TriangleMesh, format: PlyFormat) -> Result<(), FormatError> {
    let counts = counts_path(path);
    let name = counts
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let positions: Vec<_> = mesh.vertices.iter().map(|v| v.position).collect();
    let colors: Vec<_> = mesh
        .vertices
        .iter()
        .map(|v| v.color.map(color_to_u8))
        .collect();
    write_colored(
        path,
        &positions,
        &colors,
        &mesh.triangles,
        &[format!("{COUNTS_COMMENT} {name}")],
        format,
    )?;
    let mut s = String::from("vertex_id,observation_count\n");
    for (i, v) in mesh.vertices.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", v.observation_count));
    }
    write_text(&counts, &s)
}

struct Header {
    format: PlyFormat,
    vertices: usize,
    faces: usize,
    counts_file: Option<String>,
}

fn parse_header(path: &Path, r: &mut impl BufRead) -> Result<Header, FormatError> {
    let mut line = String::new();
    let mut lineno = 0;
    let mut format = None;
    let (mut vertices, mut faces) = (None, None);
    let mut counts_file = None;
    let mut props = Vec::new();
    loop {
        line.clear();
        lineno += 1;
        if r.read_line(&mut line).map_err(|e| FormatError::io(path, e))? == 0 {
            return Err(FormatError::parse(path, lineno, "missing end_header"));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["ply"] if lineno == 1 => {}
            _ if lineno == 1 => return Err(FormatError::parse(path, 1, "not a PLY file")),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", other, ..] => {
                return Err(FormatError::parse(path, lineno, format!("unsupported format {other}")))
            }
            ["comment", key, file] if *key == COUNTS_COMMENT => counts_file = Some(file.to_string()),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => vertices = n.parse().ok(),
            ["element", "face", n] => faces = n.parse().ok(),
            ["element", other, ..] => {
                return Err(FormatError::parse(path, lineno, format!("unexpected element {other}")))
            }
            ["property", rest @ ..] => props.push(rest.join(" ")),
            ["end_header"] => break,
            _ => return Err(FormatError::parse(path, lineno, "bad header line")),
        }
    }
    let expected = [
        "double x",
        "double y",
        "double z",
        "uchar red",
        "uchar green",
        "uchar blue",
        "list uchar int vertex_indices",
    ];
    if props != expected {
        return Err(FormatError::parse(path, lineno, "unsupported property layout"));
    }
    match (format, vertices, faces) {
        (Some(format), Some(vertices), Some(faces)) => Ok(Header {
            format,
            vertices,
            faces,
            counts_file,
        }),
        _ => Err(FormatError::parse(path, lineno, "incomplete header")),
    }
}

/// Reads a mesh written by [`write_mesh`]. Colors come back quantized to
/// 8 bits; counts are restored when the referenced file exists.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh, FormatError> {
    let file = std::fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    let mut r = BufReader::new(file);
    let h = parse_header(path, &mut r)?;
    let mut positions = Vec::with_capacity(h.vertices);
    let mut colors = Vec::with_capacity(h.vertices);
    let mut triangles = Vec::with_capacity(h.faces);
    let truncated = |e: std::io::Error| FormatError::parse(path, 0, format!("truncated body: {e}"));
    match h.format {
        PlyFormat::BinaryLittleEndian => {
            let mut buf = [0u8; 27];
            for _ in 0..h.vertices {
                r.read_exact(&mut buf).map_err(truncated)?;
                let f = |i: usize| f64::from_le_bytes(buf[8 * i..8 * i + 8].try_into().unwrap());
                positions.push(Vector3::new(f(0), f(1), f(2)));
                colors.push([buf[24], buf[25], buf[26]]);
            }
            let mut fb = [0u8; 13];
            for _ in 0..h.faces {
                r.read_exact(&mut fb).map_err(truncated)?;
                if fb[0] != 3 {
                    return Err(FormatError::parse(path, 0, "only triangles are supported"));
                }
                let i = |k: usize| i32::from_le_bytes(fb[1 + 4 * k..5 + 4 * k].try_into().unwrap());
                triangles.push([i(0) as u32, i(1) as u32, i(2) as u32]);
            }
        }
        PlyFormat::Ascii => {
            let mut body = String::new();
            r.read_to_string(&mut body).map_err(|e| FormatError::io(path, e))?;
            let mut lines = body.lines().filter(|l| !l.trim().is_empty());
            let bad = |what: &str| FormatError::parse(path, 0, format!("bad {what} record"));
            for _ in 0..h.vertices {
                let w: Vec<&str> = lines.next().ok_or_else(|| bad("vertex"))?.split_whitespace().collect();
                if w.len() != 6 {
                    return Err(bad("vertex"));
                }
                let p: Result<Vec<f64>, _> = w[..3].iter().map(|s| s.parse()).collect();
                let c: Result<Vec<u8>, _> = w[3..].iter().map(|s| s.parse()).collect();
                let (p, c) = (p.map_err(|_| bad("vertex"))?, c.map_err(|_| bad("vertex"))?);
                positions.push(Vector3::new(p[0], p[1], p[2]));
                colors.push([c[0], c[1], c[2]]);
            }
            for _ in 0..h.faces {
                let w: Result<Vec<u32>, _> = lines
                    .next()
                    .ok_or_else(|| bad("face"))?
                    .split_whitespace()
                    .map(|s| s.parse())
                    .collect();
                match w.map_err(|_| bad("face"))?.as_slice() {
                    [3, a, b, c] => triangles.push([*a, *b, *c]),
                    _ => return Err(bad("face")),
                }
            }
        }
    }
    let mut counts = vec![0u32; h.vertices];
    if let Some(name) = &h.counts_file {
        let cp = path.with_file_name(name);
        if cp.exists() {
            let text = read_text(&cp)?;
            for row in csv_rows(&cp, &text) {
                row.expect_len(2)?;
                let i: usize = row.get(0)?;
                if i < counts.len() {
                    counts[i] = row.get(1)?;
                }
            }
        }
    }
    let vertices = positions
        .into_iter()
        .zip(colors)
        .zip(counts)
        .map(|((position, c), observation_count)| MeshVertex {
            position,
            color: if observation_count == 0 && c == UNOBSERVED_COLOR.map(color_to_u8) {
                UNOBSERVED_COLOR
            } else {
                c.map(|x| x as f64 / 255.0)
            },
            observation_count,
        })
        .collect();
    let mesh = TriangleMesh {
        vertices,
        triangles,
    };
    if mesh.triangles.iter().flatten().any(|i| *i as usize >= mesh.vertices.len()) {
        return Err(FormatError::parse(path, 0, "face index out of range"));
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::test_meshes::cube;

    fn sample() -> TriangleMesh {
        let mut m = cube(0.3);
        m.vertices[2].color = [1.0, 0.0, 0.2];
        m.vertices[2].observation_count = 7;
        m.vertices[5].position.x = 0.123456789012345678;
        m
    }

    #[test]
    fn binary_and_ascii_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for fmt in [PlyFormat::BinaryLittleEndian, PlyFormat::Ascii] {
            let p = dir.path().join(format!("m_{fmt:?}.ply"));
            let m = sample();
            write_mesh(&p, &m, fmt).unwrap();
            let back = read_mesh(&p).unwrap();
            assert_eq!(back.triangles, m.triangles);
            for (a, b) in back.vertices.iter().zip(&m.vertices) {
                assert_eq!(a.position, b.position);
                assert_eq!(a.observation_count, b.observation_count);
                assert_eq!(a.color.map(color_to_u8), b.color.map(color_to_u8));
            }
            assert_eq!(back.vertices[0].color, UNOBSERVED_COLOR);
        }
    }

    #[test]
    fn binary_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mesh.ply");
        write_mesh(&p, &cube(1.0), PlyFormat::BinaryLittleEndian).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("ply\nformat binary_little_endian 1.0\ncomment observation_counts mesh_observations.csv\n"));
        let end = text.find("end_header\n").unwrap() + "end_header\n".len();
        assert_eq!(bytes.len() - end, 8 * 27 + 12 * 13);
        assert!(dir.path().join("mesh_observations.csv").exists());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ply");
        std::fs::write(&p, "hello\n").unwrap();
        assert!(read_mesh(&p).is_err());
        write_mesh(&p, &cube(1.0), PlyFormat::BinaryLittleEndian).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(read_mesh(&p).is_err());
    }
}

//! Triangle meshes extracted from the occupancy volume.

mod colorize;
mod marching;
pub mod ply;
mod tables;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use thiserror::Error;

pub use colorize::{colorize_mesh, ColorFrame, Occlusion};
pub use marching::extract_isosurface;

use crate::volume::VolumeError;

/// Color given to vertices that were never observed.
pub const UNOBSERVED_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Error)]
pub enum SurfaceError {
    #[error("volume has no iso-level crossing")]
    EmptyVolume,
    #[error("no frames to colorize from")]
    NoFrames,
    #[error("frame {index} is {got:?}, intrinsics expect {expected:?}")]
    FrameSizeMismatch {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshVertex {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
    pub observation_count: u32,
}

impl MeshVertex {
    pub fn at(position: Vector3<f64>) -> Self {
        Self {
            position,
            color: UNOBSERVED_COLOR,
            observation_count: 0,
        }
    }
}

/// Indexed triangle mesh; triangles wind counter-clockwise seen from outside.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<MeshVertex>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn from_positions(positions: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Self {
        Self {
            vertices: positions.into_iter().map(MeshVertex::at).collect(),
            triangles,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    #[inline]
    pub fn corners(&self, t: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize].position,
            self.vertices[b as usize].position,
            self.vertices[c as usize].position,
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn centroid(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.corners(t);
        (a + b + c) / 3.0
    }

    /// Unit normal following the counter-clockwise winding.
    pub fn normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Volume enclosed by a closed mesh; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Number of incident triangles per undirected edge.
    pub fn edge_incidence(&self) -> BTreeMap<(u32, u32), usize> {
        let mut m = BTreeMap::new();
        for tri in &self.triangles {
            for i in 0..3 {
                let (a, b) = (tri[i], tri[(i + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// Every undirected edge bounds exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_incidence().values().all(|c| *c == 2)
    }

    /// Checks index ranges and that no triangle repeats a vertex. Zero-area
    /// slivers are legal: marching cubes emits them next to samples that sit
    /// almost exactly on the iso level, and dropping them opens holes.
    pub fn validate(&self) -> Result<(), SurfaceError> {
        let n = self.vertices.len() as u32;
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|i| *i >= n) {
                return Err(SurfaceError::InvalidMesh(format!("triangle {t} index out of range")));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(SurfaceError::InvalidMesh(format!("triangle {t} is degenerate")));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the vertices.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.vertices.first()?.position;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(&v.position), hi.sup(&v.position))
        }))
    }
}

#[cfg(test)]
pub(crate) mod test_meshes {
    use super::*;

    /// Axis-aligned cube of edge `size` centered at the origin, 12 triangles.
    pub fn cube(size: f64) -> TriangleMesh {
        let h = size / 2.0;
        let p = |x: f64, y: f64, z: f64| Vector3::new(x * h, y * h, z * h);
        let positions = vec![
            p(-1.0, -1.0, -1.0),
            p(1.0, -1.0, -1.0),
            p(1.0, 1.0, -1.0),
            p(-1.0, 1.0, -1.0),
            p(-1.0, -1.0, 1.0),
            p(1.0, -1.0, 1.0),
            p(1.0, 1.0, 1.0),
            p(-1.0, 1.0, 1.0),
        ];
        let triangles = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [2, 3, 7],
            [2, 7, 6],
            [1, 2, 6],
            [1, 6, 5],
            [0, 4, 7],
            [0, 7, 3],
        ];
        TriangleMesh::from_positions(positions, triangles)
    }

    #[test]
    fn cube_is_closed_and_outward() {
        let m = cube(1.0);
        assert!(m.is_watertight());
        assert!((m.surface_area() - 6.0).abs() < 1e-12);
        assert!((m.signed_volume() - 1.0).abs() < 1e-12);
        m.validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_meshes() {
        let mut m = cube(1.0);
        m.triangles.push([0, 1, 99]);
        assert!(m.validate().is_err());
        let mut m = cube(1.0);
        m.triangles.push([0, 0, 1]);
        assert!(m.validate().is_err());
    }
}

//! Gaze rays against the reconstructed mesh: fixation points and saliency.

mod obb;
pub mod io;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

pub use obb::{ray_triangle, NodeKind, Obb, ObbNode, ObbTree, RayHit, LEAF_SIZE};

use crate::geometry::{pixel_ray, Intrinsics, Pose6D, Ray};
use crate::surface::TriangleMesh;

/// Default saliency kernel width (m).
pub const DEFAULT_SIGMA: f64 = 0.02;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("gaze sample at t={0} is flagged invalid")]
    InvalidSample(f64),
    #[error("saliency sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("tree has {tree} triangles, mesh has {mesh}")]
    MeshMismatch { tree: usize, mesh: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeSample {
    pub timestamp: f64,
    /// Scene-camera pixel coordinates.
    pub pixel: Vector2<f64>,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixationHit {
    pub timestamp: f64,
    pub triangle_id: u32,
    pub point: Vector3<f64>,
    pub distance: f64,
}

/// Casts `ray` into the tree.
pub fn intersect_ray(tree: &ObbTree, ray: &Ray) -> Option<RayHit> {
    tree.intersect(ray)
}

/// 3D fixation of a gaze sample seen from `pose`; `Ok(None)` is a miss.
pub fn recover_fixation(
    pose: &Pose6D,
    k: &Intrinsics,
    sample: &GazeSample,
    tree: &ObbTree,
) -> Result<Option<FixationHit>, GazeError> {
    if !sample.valid {
        return Err(GazeError::InvalidSample(sample.timestamp));
    }
    let ray = pixel_ray(&sample.pixel, pose, k);
    Ok(tree.intersect(&ray).map(|h| FixationHit {
        timestamp: sample.timestamp,
        triangle_id: h.triangle,
        point: h.point,
        distance: h.distance,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub weights: Vec<f64>,
    pub total_hits: usize,
    pub sigma: f64,
}

impl SaliencyMap {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Unnormalized kernel weights of one hit, as `(triangle, weight)` sorted by
/// triangle id. The hit triangle is always part of the neighborhood.
pub fn kernel_weights(tree: &ObbTree, hit: &FixationHit, sigma: f64) -> Vec<(u32, f64)> {
    let mut ids = tree.triangles_within(&hit.point, 3.0 * sigma);
    if let Err(pos) = ids.binary_search(&hit.triangle_id) {
        ids.insert(pos, hit.triangle_id);
    }
    let s2 = 2.0 * sigma * sigma;
    ids.into_iter()
        .map(|t| (t, (-(tree.centroid(t) - hit.point).norm_squared() / s2).exp()))
        .collect()
}

/// Gaussian-weighted per-triangle fixation mass; each hit contributes a
/// total of one.
pub fn accumulate_saliency(
    hits: &[FixationHit],
    mesh: &TriangleMesh,
    tree: &ObbTree,
    sigma: f64,
) -> Result<SaliencyMap, GazeError> {
    if !(sigma > 0.0) {
        return Err(GazeError::InvalidSigma(sigma));
    }
    let n = mesh.triangles.len();
    if tree.triangle_count() != n {
        return Err(GazeError::MeshMismatch {
            tree: tree.triangle_count(),
            mesh: n,
        });
    }
    let per_hit: Vec<Vec<(u32, f64)>> = hits
        .par_iter()
        .map(|h| {
            let mut w = kernel_weights(tree, h, sigma);
            let s: f64 = w.iter().map(|(_, x)| x).sum();
            w.iter_mut().for_each(|(_, x)| *x /= s);
            w
        })
        .collect();
    let mut weights = vec![0.0; n];
    for w in per_hit {
        for (t, x) in w {
            weights[t as usize] += x;
        }
    }
    Ok(SaliencyMap {
        weights,
        total_hits: hits.len(),
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::test_meshes::cube;

    fn grid_mesh(n: usize, step: f64) -> TriangleMesh {
        let mut pos = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                pos.push(Vector3::new(i as f64 * step, j as f64 * step, 1.0));
            }
        }
        let mut tris = Vec::new();
        let id = |i: usize, j: usize| (j * (n + 1) + i) as u32;
        for j in 0..n {
            for i in 0..n {
                tris.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                tris.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        TriangleMesh::from_positions(pos, tris)
    }

    fn hit_at(tree: &ObbTree, x: f64, y: f64) -> FixationHit {
        let ray = Ray::new(Vector3::new(x, y, 0.0), Vector3::z());
        let h = tree.intersect(&ray).unwrap();
        FixationHit {
            timestamp: 0.0,
            triangle_id: h.triangle,
            point: h.point,
            distance: h.distance,
        }
    }

    #[test]
    fn empty_hits_give_zero_map() {
        let m = cube(1.0);
        let tree = ObbTree::build(&m).unwrap();
        let s = accumulate_saliency(&[], &m, &tree, DEFAULT_SIGMA).unwrap();
        assert!(s.weights.iter().all(|w| *w == 0.0));
        assert_eq!(s.total_hits, 0);
    }

    #[test]
    fn single_hit_peak_and_mass() {
        let m = grid_mesh(30, 0.005);
        let tree = ObbTree::build(&m).unwrap();
        let h = hit_at(&tree, 0.0701, 0.0752);
        let s = accumulate_saliency(&[h], &m, &tree, 0.02).unwrap();
        assert!((s.total() - 1.0).abs() < 1e-12);
        // Monotone in centroid distance; the peak sits on the closest centroid.
        let mut by_dist: Vec<(f64, f64)> = (0..m.triangles.len())
            .filter(|t| s.weights[*t] > 0.0)
            .map(|t| ((m.centroid(t) - h.point).norm(), s.weights[t]))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(by_dist.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-15));
        assert!(by_dist.iter().all(|(d, _)| *d <= 0.06 + 1e-12));
        let max = s.weights.iter().cloned().fold(0.0, f64::max);
        let nearest = (0..m.triangles.len())
            .min_by(|a, b| {
                (m.centroid(*a) - h.point)
                    .norm()
                    .total_cmp(&(m.centroid(*b) - h.point).norm())
            })
            .unwrap();
        assert_eq!(s.weights[nearest], max);
    }

    #[test]
    fn hit_triangle_carries_the_maximum() {
        let m = grid_mesh(30, 0.005);
        let tree = ObbTree::build(&m).unwrap();
        let h = hit_at(&tree, 0.07 + 0.005 * 2.0 / 3.0, 0.07 + 0.005 / 3.0);
        let s = accumulate_saliency(&[h], &m, &tree, 0.02).unwrap();
        let max = s.weights.iter().cloned().fold(0.0, f64::max);
        assert_eq!(s.weights[h.triangle_id as usize], max);
    }

    #[test]
    fn kernel_value_at_sigma() {
        let m = grid_mesh(4, 0.01);
        let tree = ObbTree::build(&m).unwrap();
        let c = m.centroid(0);
        let hit = FixationHit {
            timestamp: 0.0,
            triangle_id: 0,
            point: c + Vector3::new(0.0, 0.0, 0.02),
            distance: 1.0,
        };
        let w = kernel_weights(&tree, &hit, 0.02);
        let w0 = w.iter().find(|(t, _)| *t == 0).unwrap().1;
        assert!((w0 - (-0.5f64).exp()).abs() < 1e-12);
        assert!((w0 - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = cube(1.0);
        let tree = ObbTree::build(&m).unwrap();
        assert!(matches!(
            accumulate_saliency(&[], &m, &tree, 0.0),
            Err(GazeError::InvalidSigma(_))
        ));
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let s = GazeSample {
            timestamp: 1.0,
            pixel: Vector2::new(50.0, 50.0),
            valid: false,
        };
        assert!(matches!(
            recover_fixation(&Pose6D::identity(), &k, &s, &tree),
            Err(GazeError::InvalidSample(_))
        ));
    }

    #[test]
    fn fixation_at_projected_target() {
        let m = cube(1.0);
        let tree = ObbTree::build(&m).unwrap();
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let pose = Pose6D::look_at(
            Vector3::new(0.3, 0.2, -2.0),
            Vector3::zeros(),
            Vector3::y(),
        );
        let target = Vector3::new(0.1, -0.2, -0.5);
        let px = crate::geometry::project(&target, &pose, &k).unwrap();
        let s = GazeSample {
            timestamp: 4.5,
            pixel: px,
            valid: true,
        };
        let hit = recover_fixation(&pose, &k, &s, &tree).unwrap().unwrap();
        assert!((hit.point - target).norm() < 1e-6);
        assert_eq!(hit.timestamp, 4.5);
        let away = GazeSample {
            pixel: Vector2::new(0.0, 0.0),
            ..s
        };
        assert!(recover_fixation(&pose, &k, &away, &tree).unwrap().is_none());
    }
}

//! Oriented-bounding-box tree over mesh triangles.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::GazeError;
use crate::geometry::Ray;
use crate::scalar::Real;
use crate::surface::TriangleMesh;

/// Maximum triangles per leaf.
pub const LEAF_SIZE: usize = 4;

/// Oriented box: `center + axes · s` for `|s_i| ≤ half_extents_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: Vector3<f64>,
    /// Orthonormal box axes as columns.
    pub axes: Matrix3<f64>,
    pub half_extents: Vector3<f64>,
}

impl Obb {
    /// Parameter interval `[t_near, t_far]` where the ray is inside the box,
    /// restricted to `t ≥ 0`.
    pub fn ray_interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let o = self.axes.tr_mul(&(ray.origin - self.center));
        let d = self.axes.tr_mul(&ray.direction);
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            let h = self.half_extents[a];
            if d[a] == 0.0 {
                if o[a].abs() > h {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((-h - o[a]) * inv, (h - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    /// Euclidean distance from a point to the box (0 inside).
    pub fn distance_to_point(&self, p: &Vector3<f64>) -> f64 {
        let local = self.axes.tr_mul(&(p - self.center));
        let mut sq = 0.0;
        for a in 0..3 {
            let excess = local[a].abs() - self.half_extents[a];
            if excess > 0.0 {
                sq += excess * excess;
            }
        }
        sq.sqrt()
    }

    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        let local = self.axes.tr_mul(&(p - self.center));
        (0..3).all(|a| local[a].abs() <= self.half_extents[a] + tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Range into the tree's triangle order.
    Leaf { start: u32, len: u32 },
    Internal { left: u32, right: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObbNode {
    pub obb: Obb,
    pub kind: NodeKind,
}

/// Nearest intersection of a ray with a triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub triangle: u32,
    pub point: Vector3<f64>,
    pub distance: f64,
    /// Barycentric coordinates `(u, v)` of the hit relative to corners 1, 2.
    pub barycentric: (f64, f64),
}

impl RayHit {
    /// Orders hits by distance, then by triangle index.
    fn closer_than(&self, other: &Option<RayHit>) -> bool {
        match other {
            None => true,
            Some(o) => {
                self.distance < o.distance
                    || (self.distance == o.distance && self.triangle < o.triangle)
            }
        }
    }
}

/// Möller–Trumbore ray/triangle test with inclusive edges. Returns
/// `(t, u, v)` for hits at positive distance.
pub fn ray_triangle<T: Real>(ray: &Ray<T>, tri: &[Vector3<T>; 3]) -> Option<(T, T, T)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = ray.direction.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() <= T::default_epsilon() * e1.norm() * e2.norm() {
        return None;
    }
    let inv = T::one() / det;
    let s = ray.origin - tri[0];
    let u = s.dot(&p) * inv;
    if u < T::zero() || u > T::one() {
        return None;
    }
    let q = s.cross(&e1);
    let v = ray.direction.dot(&q) * inv;
    if v < T::zero() || u + v > T::one() {
        return None;
    }
    let t = e2.dot(&q) * inv;
    if t > T::zero() {
        Some((t, u, v))
    } else {
        None
    }
}

/// Hierarchy of oriented boxes over a mesh's triangles. Holds its own copy
/// of the triangle geometry, so it is immutable and `Sync` after build.
#[derive(Debug, Clone)]
pub struct ObbTree {
    nodes: Vec<ObbNode>,
    order: Vec<u32>,
    triangles: Vec<[Vector3<f64>; 3]>,
    centroids: Vec<Vector3<f64>>,
}

fn covariance(points: impl Iterator<Item = Vector3<f64>> + Clone) -> Matrix3<f64> {
    let n = points.clone().count().max(1) as f64;
    let mean = points.clone().fold(Vector3::zeros(), |a, p| a + p) / n;
    points.fold(Matrix3::zeros(), |acc, p| {
        let d = p - mean;
        acc + d * d.transpose()
    }) / n
}

/// Orthonormal right-handed eigenbasis sorted by decreasing eigenvalue.
fn principal_axes(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let a0 = eig.eigenvectors.column(idx[0]).into_owned();
    let a1 = eig.eigenvectors.column(idx[1]).into_owned();
    let a0 = a0.normalize();
    let a1 = (a1 - a0 * a0.dot(&a1)).normalize();
    let a2 = a0.cross(&a1);
    Matrix3::from_columns(&[a0, a1, a2])
}

impl ObbTree {
    /// Top-down build: each node's box follows the principal axes of its
    /// vertices; nodes split at the mean centroid projection along the
    /// dominant centroid axis, or at the median when that leaves a side empty.
    pub fn build(mesh: &TriangleMesh) -> Result<Self, GazeError> {
        if mesh.triangles.is_empty() {
            return Err(GazeError::EmptyMesh);
        }
        let triangles: Vec<[Vector3<f64>; 3]> =
            (0..mesh.triangles.len()).map(|t| mesh.corners(t)).collect();
        let centroids: Vec<Vector3<f64>> =
            triangles.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
        let mut nodes: Vec<ObbNode> = Vec::new();
        let mut work = vec![(usize::MAX, false, 0usize, order.len())];
        while let Some((parent, is_right, start, end)) = work.pop() {
            let ids = &mut order[start..end];
            let obb = fit_box(ids, &triangles);
            let node = nodes.len();
            nodes.push(ObbNode {
                obb,
                kind: NodeKind::Leaf {
                    start: start as u32,
                    len: (end - start) as u32,
                },
            });
            if parent != usize::MAX {
                if let NodeKind::Internal { left, right } = &mut nodes[parent].kind {
                    if is_right {
                        *right = node as u32;
                    } else {
                        *left = node as u32;
                    }
                }
            }
            if ids.len() <= LEAF_SIZE {
                continue;
            }
            let axis = principal_axes(&covariance(ids.iter().map(|i| centroids[*i as usize])))
                .column(0)
                .into_owned();
            let proj = |i: &u32| centroids[*i as usize].dot(&axis);
            let mean = ids.iter().map(proj).sum::<f64>() / ids.len() as f64;
            let mut split = partition_stable(ids, |i| proj(i) < mean);
            if split == 0 || split == ids.len() {
                ids.sort_by(|a, b| proj(a).total_cmp(&proj(b)).then(a.cmp(b)));
                split = ids.len() / 2;
            }
            nodes[node].kind = NodeKind::Internal { left: 0, right: 0 };
            work.push((node, true, start + split, end));
            work.push((node, false, start, start + split));
        }
        Ok(Self {
            nodes,
            order,
            triangles,
            centroids,
        })
    }

    pub fn nodes(&self) -> &[ObbNode] {
        &self.nodes
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle(&self, t: u32) -> &[Vector3<f64>; 3] {
        &self.triangles[t as usize]
    }

    pub fn centroid(&self, t: u32) -> Vector3<f64> {
        self.centroids[t as usize]
    }

    /// Triangle ids of every leaf, in node order.
    pub fn leaves(&self) -> Vec<&[u32]> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Leaf { start, len } => {
                    Some(&self.order[start as usize..(start + len) as usize])
                }
                NodeKind::Internal { .. } => None,
            })
            .collect()
    }

    /// Triangle ids under a node.
    pub fn descendants(&self, node: usize) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            match self.nodes[n].kind {
                NodeKind::Leaf { start, len } => {
                    out.extend_from_slice(&self.order[start as usize..(start + len) as usize])
                }
                NodeKind::Internal { left, right } => {
                    stack.push(left as usize);
                    stack.push(right as usize);
                }
            }
        }
        out
    }

    fn test_triangle(&self, ray: &Ray, t: u32) -> Option<RayHit> {
        ray_triangle(ray, &self.triangles[t as usize]).map(|(d, u, v)| RayHit {
            triangle: t,
            point: ray.at(d),
            distance: d,
            barycentric: (u, v),
        })
    }

    /// Nearest hit, visiting children near-to-far and pruning boxes that
    /// start beyond the best hit so far.
    pub fn intersect(&self, ray: &Ray) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        let root = self.nodes[0].obb.ray_interval(ray)?;
        let mut stack: Vec<(u32, f64)> = vec![(0, root.0)];
        while let Some((n, t_enter)) = stack.pop() {
            if let Some(b) = &best {
                if t_enter > b.distance {
                    continue;
                }
            }
            match self.nodes[n as usize].kind {
                NodeKind::Leaf { start, len } => {
                    for &t in &self.order[start as usize..(start + len) as usize] {
                        if let Some(h) = self.test_triangle(ray, t) {
                            if h.closer_than(&best) {
                                best = Some(h);
                            }
                        }
                    }
                }
                NodeKind::Internal { left, right } => {
                    let l = self.nodes[left as usize].obb.ray_interval(ray);
                    let r = self.nodes[right as usize].obb.ray_interval(ray);
                    match (l, r) {
                        (Some(l), Some(r)) => {
                            if l.0 <= r.0 {
                                stack.push((right, r.0));
                                stack.push((left, l.0));
                            } else {
                                stack.push((left, l.0));
                                stack.push((right, r.0));
                            }
                        }
                        (Some(l), None) => stack.push((left, l.0)),
                        (None, Some(r)) => stack.push((right, r.0)),
                        (None, None) => {}
                    }
                }
            }
        }
        best
    }

    /// Reference answer: tests every triangle.
    pub fn intersect_brute_force(&self, ray: &Ray) -> Option<RayHit> {
        let mut best = None;
        for t in 0..self.triangles.len() as u32 {
            if let Some(h) = self.test_triangle(ray, t) {
                if h.closer_than(&best) {
                    best = Some(h);
                }
            }
        }
        best
    }

    /// Triangles whose centroid lies within `radius` of `p`, ascending ids.
    pub fn triangles_within(&self, p: &Vector3<f64>, radius: f64) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![0u32];
        let r2 = radius * radius;
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if node.obb.distance_to_point(p) > radius {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, len } => {
                    for &t in &self.order[start as usize..(start + len) as usize] {
                        if (self.centroids[t as usize] - p).norm_squared() <= r2 {
                            out.push(t);
                        }
                    }
                }
                NodeKind::Internal { left, right } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn fit_box(ids: &[u32], triangles: &[[Vector3<f64>; 3]]) -> Obb {
    let verts = ids.iter().flat_map(|i| triangles[*i as usize].iter().copied());
    let axes = principal_axes(&covariance(verts.clone()));
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in verts {
        let s = axes.tr_mul(&v);
        lo = lo.inf(&s);
        hi = hi.sup(&s);
    }
    let half = (hi - lo) * 0.5;
    let pad = 1e-9 * (1.0 + half.amax() + ((hi + lo) * 0.5).amax());
    Obb {
        center: axes * ((hi + lo) * 0.5),
        axes,
        half_extents: half.add_scalar(pad),
    }
}

/// Stable in-place partition; returns the count of elements satisfying `pred`.
fn partition_stable(ids: &mut [u32], pred: impl Fn(&u32) -> bool) -> usize {
    let (yes, no): (Vec<u32>, Vec<u32>) = ids.iter().partition(|i| pred(i));
    let n = yes.len();
    ids[..n].copy_from_slice(&yes);
    ids[n..].copy_from_slice(&no);
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::test_meshes::cube;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_triangle_is_one_leaf() {
        let m = TriangleMesh::from_positions(
            vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
            vec![[0, 1, 2]],
        );
        let tree = ObbTree::build(&m).unwrap();
        assert_eq!(tree.nodes().len(), 1);
        assert_eq!(tree.leaves(), vec![&[0u32][..]]);
    }

    #[test]
    fn empty_mesh_is_rejected() {
        assert!(matches!(
            ObbTree::build(&TriangleMesh::default()),
            Err(GazeError::EmptyMesh)
        ));
    }

    #[test]
    fn cube_face_hit() {
        let tree = ObbTree::build(&cube(1.0)).unwrap();
        let ray = Ray::new(Vector3::new(0.0, 0.0, -1.0), Vector3::z());
        let hit = tree.intersect(&ray).unwrap();
        assert!((hit.point - Vector3::new(0.0, 0.0, -0.5)).norm() < 1e-12);
        assert!((hit.distance - 0.5).abs() < 1e-12);
        let c = tree.triangle(hit.triangle);
        assert!(c.iter().all(|v| (v.z + 0.5).abs() < 1e-12));
        let away = Ray::new(Vector3::new(0.0, 0.0, -1.0), -Vector3::z());
        assert!(tree.intersect(&away).is_none());
    }

    #[test]
    fn partition_and_containment() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 500;
        let mut pos = Vec::new();
        let mut tris = Vec::new();
        for i in 0..n {
            let c = Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            for _ in 0..3 {
                pos.push(c + Vector3::new(rng.random::<f64>(), rng.random(), rng.random()) * 0.05);
            }
            tris.push([3 * i, 3 * i + 1, 3 * i + 2]);
        }
        let m = TriangleMesh::from_positions(pos, tris);
        let tree = ObbTree::build(&m).unwrap();
        let mut all: Vec<u32> = tree.leaves().into_iter().flatten().copied().collect();
        assert!(tree.leaves().iter().all(|l| l.len() <= LEAF_SIZE && !l.is_empty()));
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<u32>>());
        for (i, node) in tree.nodes().iter().enumerate() {
            for t in tree.descendants(i) {
                for v in tree.triangle(t) {
                    assert!(node.obb.contains(v, 1e-9));
                }
            }
        }
    }

    #[test]
    fn radius_query_matches_scan() {
        let tree = ObbTree::build(&cube(1.0)).unwrap();
        let p = Vector3::new(0.5, 0.1, 0.0);
        let got = tree.triangles_within(&p, 0.45);
        let want: Vec<u32> = (0..12u32)
            .filter(|t| (tree.centroid(*t) - p).norm() <= 0.45)
            .collect();
        assert_eq!(got, want);
        assert!(!got.is_empty());
    }

    #[test]
    fn moller_trumbore_generic_f32() {
        let tri = [
            Vector3::new(-1.0f32, -1.0, 2.0),
            Vector3::new(1.0, -1.0, 2.0),
            Vector3::new(0.0, 1.0, 2.0),
        ];
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0f32, 0.0, 1.0));
        let (t, _, _) = ray_triangle(&ray, &tri).unwrap();
        assert!((t - 2.0).abs() < 1e-6);
    }
}

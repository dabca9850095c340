use gazemap_core::gaze::{accumulate_saliency, FixationHit, ObbTree};
use gazemap_core::io::{format_poses, read_poses, write_poses};
use gazemap_core::metrics::compute_dwells;
use gazemap_core::surface::ply::{read_mesh, write_mesh, PlyFormat};
use gazemap_core::surface::{extract_isosurface, TriangleMesh};
use gazemap_core::volume::VoxelGrid;
use gazemap_core::{Pose6D, Ray};
use nalgebra::Vector3;
use proptest::prelude::*;

fn v3() -> impl Strategy<Value = Vector3<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn soup() -> impl Strategy<Value = TriangleMesh> {
    prop::collection::vec((v3(), v3(), v3()), 1..120).prop_map(|tris| {
        let mut pos = Vec::new();
        let mut idx = Vec::new();
        for (i, (a, b, c)) in tris.into_iter().enumerate() {
            // Shrink each triangle toward its first corner so they overlap less.
            pos.extend([a, a + (b - a) * 0.3, a + (c - a) * 0.3]);
            let i = 3 * i as u32;
            idx.push([i, i + 1, i + 2]);
        }
        TriangleMesh::from_positions(pos, idx)
    })
}

fn sorted_points(mesh: &TriangleMesh) -> Vec<[f64; 3]> {
    let mut p: Vec<[f64; 3]> = mesh.vertices.iter().map(|v| v.position.into()).collect();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap());
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tree_matches_brute_force(mesh in soup(), rays in prop::collection::vec((v3(), v3()), 1..40)) {
        let tree = ObbTree::build(&mesh).unwrap();
        for (o, t) in rays {
            let origin = o * 2.0;
            prop_assume!((t - origin).norm() > 1e-6);
            let ray = Ray::new(origin, t - origin);
            let fast = tree.intersect(&ray);
            let slow = tree.intersect_brute_force(&ray);
            prop_assert_eq!(fast.map(|h| h.triangle), slow.map(|h| h.triangle));
            if let (Some(a), Some(b)) = (fast, slow) {
                prop_assert!((a.point - b.point).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn saliency_mass_equals_hit_count(
        mesh in soup(),
        picks in prop::collection::vec((any::<prop::sample::Index>(), 0.0..1.0f64, 0.0..1.0f64), 0..60),
        sigma in 0.01..0.5f64,
    ) {
        let tree = ObbTree::build(&mesh).unwrap();
        let hits: Vec<FixationHit> = picks
            .iter()
            .enumerate()
            .map(|(i, (ix, u, v))| {
                let t = ix.index(mesh.triangles.len());
                let [a, b, c] = mesh.corners(t);
                let (u, v) = if u + v > 1.0 { (1.0 - u, 1.0 - v) } else { (*u, *v) };
                FixationHit {
                    timestamp: i as f64,
                    triangle_id: t as u32,
                    point: a + (b - a) * u + (c - a) * v,
                    distance: 1.0,
                }
            })
            .collect();
        let map = accumulate_saliency(&hits, &mesh, &tree, sigma).unwrap();
        prop_assert!((map.total() - hits.len() as f64).abs() <= 1e-6);
        prop_assert!(map.weights.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn ply_round_trips(mesh in soup(), ascii in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
        write_mesh(&path, &mesh, format).unwrap();
        let back = read_mesh(&path).unwrap();
        prop_assert_eq!(&back.triangles, &mesh.triangles);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            prop_assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn pose_files_round_trip(
        poses in prop::collection::vec((any::<u32>(), v3(), v3()), 0..20),
    ) {
        let poses: Vec<(u64, Pose6D)> = poses
            .into_iter()
            .map(|(id, w, t)| (id as u64, Pose6D::from_axis_angle(w * 3.0, t * 10.0)))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.csv");
        write_poses(&path, &poses).unwrap();
        let back = read_poses(&path).unwrap();
        prop_assert_eq!(format_poses(&back), format_poses(&poses));
        prop_assert_eq!(back, poses);
    }

    #[test]
    fn dwells_partition_the_hits(hits in prop::collection::vec(any::<bool>(), 0..200), min_samples in 0usize..4) {
        let period = 1.0 / 30.0;
        let samples: Vec<(f64, bool)> = hits.iter().enumerate().map(|(i, h)| (i as f64 * period, *h)).collect();
        let all = compute_dwells(&samples, 0, period, 0.0).unwrap();
        prop_assert_eq!(all.iter().map(|d| d.samples).sum::<usize>(), hits.iter().filter(|h| **h).count());
        for w in all.windows(2) {
            prop_assert!(w[0].exit < w[1].entry);
        }
        let min = (min_samples as f64 - 0.5) * period;
        let kept = compute_dwells(&samples, 0, period, min.max(0.0)).unwrap();
        let expect: Vec<_> = all.iter().filter(|d| d.samples >= min_samples).cloned().collect();
        prop_assert_eq!(kept, expect);
    }

    #[test]
    fn isosurface_ignores_page_size(
        center in (0.3..0.5f64, 0.3..0.5f64, 0.3..0.5f64),
        radius in 0.1..0.28f64,
    ) {
        let c = Vector3::new(center.0, center.1, center.2);
        let mesh = |edge| {
            let mut g = VoxelGrid::new(Vector3::zeros(), 0.025, [32, 32, 32], edge).unwrap();
            g.fill_log_odds(|p| ((radius - (p - c).norm()) / 0.025) as f32).unwrap();
            extract_isosurface(&mut g, 0.5).unwrap()
        };
        let (a, b) = (mesh(8), mesh(32));
        prop_assert!(a.is_watertight());
        prop_assert_eq!(sorted_points(&a), sorted_points(&b));
        prop_assert_eq!(a.triangles.len(), b.triangles.len());
    }

    #[test]
    fn paging_budget_does_not_change_contents(
        writes in prop::collection::vec(((0usize..32, 0usize..32, 0usize..32), -3.0..3.0f32), 1..200),
        budget in 1usize..4,
    ) {
        let run = |budget| {
            let mut g = VoxelGrid::new(Vector3::zeros(), 0.1, [32, 32, 32], 8).unwrap();
            g.set_page_budget(budget).unwrap();
            for ((x, y, z), v) in &writes {
                let old = g.log_odds([*x, *y, *z]).unwrap();
                g.set_log_odds([*x, *y, *z], old + v).unwrap();
            }
            g.content_bytes().unwrap()
        };
        prop_assert_eq!(run(Some(budget)), run(None));
    }
}

use nalgebra::Vector2;
use rayon::prelude::*;

use super::{SurfaceError, TriangleMesh};
use crate::gaze::ObbTree;
use crate::geometry::{Intrinsics, Pose6D, Ray};
use crate::raster::ColorImage;

/// A color image with the world-to-camera pose it was taken from.
#[derive(Debug, Clone)]
pub struct ColorFrame {
    pub image: ColorImage,
    pub pose: Pose6D,
}

/// Occlusion test setup: tree over the same mesh and the allowed gap (m)
/// between the first surface hit and the vertex.
#[derive(Debug, Clone, Copy)]
pub struct Occlusion<'a> {
    pub tree: &'a ObbTree,
    pub tolerance: f64,
}

/// Running-average vertex coloring. Existing colors and observation counts
/// are continued, so calling this twice equals one call with all frames.
pub fn colorize_mesh(
    mesh: &TriangleMesh,
    frames: &[ColorFrame],
    k: &Intrinsics,
    occlusion: Option<Occlusion<'_>>,
) -> Result<TriangleMesh, SurfaceError> {
    if frames.is_empty() {
        return Err(SurfaceError::NoFrames);
    }
    let expected = (k.width as usize, k.height as usize);
    for (index, f) in frames.iter().enumerate() {
        let got = (f.image.width, f.image.height);
        if got != expected {
            return Err(SurfaceError::FrameSizeMismatch {
                index,
                got,
                expected,
            });
        }
    }
    let centers: Vec<_> = frames.iter().map(|f| f.pose.camera_center()).collect();
    let mut out = mesh.clone();
    out.vertices.par_iter_mut().for_each(|v| {
        for (f, center) in frames.iter().zip(&centers) {
            let pc = f.pose.transform(&v.position);
            if pc.z <= 0.0 {
                continue;
            }
            let px: Vector2<f64> = k.project_camera(&pc);
            if !k.contains(&px) {
                continue;
            }
            if let Some(occ) = &occlusion {
                let to_vertex = v.position - center;
                let dist = to_vertex.norm();
                if dist > 0.0 {
                    let ray = Ray::new(*center, to_vertex);
                    if let Some(hit) = occ.tree.intersect(&ray) {
                        if dist - hit.distance >= occ.tolerance {
                            continue;
                        }
                    }
                }
            }
            let obs = f.image.sample_bilinear(px.x, px.y);
            let n = v.observation_count as f64;
            for c in 0..3 {
                v.color[c] = (n * v.color[c] + obs[c]) / (n + 1.0);
            }
            v.observation_count += 1;
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::test_meshes::cube;
    use crate::surface::UNOBSERVED_COLOR;
    use nalgebra::Vector3;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn frame(color: [f32; 3], eye: Vector3<f64>) -> ColorFrame {
        ColorFrame {
            image: ColorImage::new(100, 100, color),
            pose: Pose6D::look_at(eye, Vector3::zeros(), Vector3::y()),
        }
    }

    #[test]
    fn uniform_red_frame() {
        let m = colorize_mesh(&cube(0.5), &[frame([1.0, 0.0, 0.0], Vector3::new(0.0, 0.0, -3.0))], &k(), None)
            .unwrap();
        for v in &m.vertices {
            assert_eq!(v.color, [1.0, 0.0, 0.0]);
            assert_eq!(v.observation_count, 1);
        }
    }

    #[test]
    fn red_then_blue_averages() {
        let eye = Vector3::new(0.0, 0.0, -3.0);
        let frames = [frame([1.0, 0.0, 0.0], eye), frame([0.0, 0.0, 1.0], eye)];
        let m = colorize_mesh(&cube(0.5), &frames, &k(), None).unwrap();
        for v in &m.vertices {
            assert_eq!(v.color, [0.5, 0.0, 0.5]);
        }
    }

    #[test]
    fn permutation_invariant() {
        let frames = vec![
            frame([0.9, 0.1, 0.3], Vector3::new(0.0, 0.0, -3.0)),
            frame([0.2, 0.7, 0.1], Vector3::new(3.0, 0.5, 0.0)),
            frame([0.4, 0.4, 0.8], Vector3::new(-2.0, 1.0, -2.0)),
            frame([0.0, 0.3, 0.6], Vector3::new(0.5, 3.0, 0.2)),
        ];
        let mesh = cube(0.5);
        let tree = ObbTree::build(&mesh).unwrap();
        let occ = Some(Occlusion {
            tree: &tree,
            tolerance: 1e-3,
        });
        let a = colorize_mesh(&mesh, &frames, &k(), occ).unwrap();
        let rev: Vec<_> = frames.iter().rev().cloned().collect();
        let b = colorize_mesh(&mesh, &rev, &k(), occ).unwrap();
        for (va, vb) in a.vertices.iter().zip(&b.vertices) {
            assert_eq!(va.observation_count, vb.observation_count);
            for c in 0..3 {
                assert!((va.color[c] - vb.color[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn occluded_vertices_are_skipped() {
        let mesh = cube(0.5);
        let tree = ObbTree::build(&mesh).unwrap();
        let occ = Occlusion {
            tree: &tree,
            tolerance: 1e-3,
        };
        let f = frame([1.0, 0.0, 0.0], Vector3::new(0.0, 0.0, -3.0));
        let m = colorize_mesh(&mesh, &[f], &k(), Some(occ)).unwrap();
        for v in &m.vertices {
            if v.position.z < 0.0 {
                assert_eq!(v.observation_count, 1);
            } else {
                assert_eq!(v.observation_count, 0);
                assert_eq!(v.color, UNOBSERVED_COLOR);
            }
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            colorize_mesh(&cube(1.0), &[], &k(), None),
            Err(SurfaceError::NoFrames)
        ));
        let mut f = frame([1.0; 3], Vector3::new(0.0, 0.0, -3.0));
        f.image = ColorImage::new(10, 10, [0.0; 3]);
        assert!(matches!(
            colorize_mesh(&cube(1.0), &[f], &k(), None),
            Err(SurfaceError::FrameSizeMismatch { .. })
        ));
    }
}

//! Robust pose from 2D-3D correspondences and its least-squares refinement.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::epnp::{check_configuration, epnp};
use super::SlamError;
use crate::geometry::{skew, Intrinsics, Pose6D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    pub world: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpParams {
    pub inlier_threshold_px: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for PnpParams {
    fn default() -> Self {
        Self {
            inlier_threshold_px: 2.0,
            confidence: 0.999,
            max_iterations: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    pub pose: Pose6D,
    pub inliers: Vec<bool>,
}

impl PnpResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

/// Reprojection residual `project(X) − x` in pixels, `None` behind the camera.
#[inline]
pub fn residual(pose: &Pose6D, k: &Intrinsics, c: &Correspondence) -> Option<Vector2<f64>> {
    let pc = pose.transform(&c.world);
    (pc.z > 0.0).then(|| k.project_camera(&pc) - c.pixel)
}

/// Derivative of the pixel projection with respect to the camera-frame point.
#[inline]
pub fn projection_jacobian(k: &Intrinsics, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz2,
    )
}

/// Jacobians of the projection of world point `x` with respect to the pose
/// increment `(ω, δt)` (left-composed) and to the point itself.
pub fn reprojection_jacobians(
    pose: &Pose6D,
    k: &Intrinsics,
    x: &Vector3<f64>,
) -> (SMatrix<f64, 2, 6>, Matrix2x3<f64>) {
    let rx = pose.rotation * x;
    let pc = rx + pose.translation;
    let jp = projection_jacobian(k, &pc);
    let mut d_pose = SMatrix::<f64, 3, 6>::zeros();
    d_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rx)));
    d_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    let j_pose = jp * d_pose;
    (j_pose, jp * pose.rotation)
}

fn cost(pose: &Pose6D, k: &Intrinsics, corr: &[Correspondence]) -> f64 {
    corr.iter()
        .map(|c| residual(pose, k, c).map_or(f64::INFINITY, |r| r.norm_squared()))
        .sum()
}

/// Outcome of a refinement, with the cost after every accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub pose: Pose6D,
    pub costs: Vec<f64>,
}

/// Levenberg–Marquardt on the summed squared reprojection error.
pub fn refine_pose(initial: &Pose6D, corr: &[Correspondence], k: &Intrinsics) -> Result<Refinement, SlamError> {
    if corr.len() < 4 {
        return Err(SlamError::DegenerateConfiguration(format!(
            "{} correspondences, need at least 4",
            corr.len()
        )));
    }
    let mut pose = *initial;
    let mut current = cost(&pose, k, corr);
    let mut costs = vec![current];
    let mut lambda = 1e-3;
    for _ in 0..100 {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in corr {
            let pc = pose.transform(&c.world);
            if pc.z <= 0.0 {
                continue;
            }
            let r = k.project_camera(&pc) - c.pixel;
            let (j, _) = reprojection_jacobians(&pose, k, &c.world);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        if !h.iter().all(|v| v.is_finite()) || h.diagonal().iter().all(|d| *d == 0.0) {
            return Err(SlamError::SingularNormalEquations);
        }
        if g.amax() == 0.0 {
            break;
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = pose.perturbed(&step.fixed_rows::<3>(0).into_owned(), &step.fixed_rows::<3>(3).into_owned());
            let c_new = cost(&candidate, k, corr);
            if c_new <= current {
                let rel = (current - c_new) / current.max(f64::MIN_POSITIVE);
                pose = candidate;
                current = c_new;
                costs.push(current);
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if rel < 1e-10 {
                    return Ok(Refinement {
                        pose: pose.orthonormalized(),
                        costs,
                    });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(Refinement {
        pose: pose.orthonormalized(),
        costs,
    })
}

fn inlier_mask(pose: &Pose6D, k: &Intrinsics, corr: &[Correspondence], thr: f64) -> Vec<bool> {
    corr.iter()
        .map(|c| residual(pose, k, c).is_some_and(|r| r.norm() < thr))
        .collect()
}

/// Required RANSAC iterations for inlier ratio `w` and sample size 4.
pub(crate) fn adaptive_iterations(w: f64, confidence: f64, cap: usize) -> usize {
    let p = w.powi(4);
    if p >= 1.0 {
        return 1;
    }
    if p <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p).ln();
    (n.ceil() as usize).clamp(1, cap)
}

/// RANSAC over minimal EPnP solutions, then refinement on the consensus set.
pub fn estimate_pose_pnp(
    corr: &[Correspondence],
    k: &Intrinsics,
    params: &PnpParams,
) -> Result<PnpResult, SlamError> {
    let world: Vec<Vector3<f64>> = corr.iter().map(|c| c.world).collect();
    check_configuration(&world)?;
    let norm: Vec<Vector2<f64>> = corr.iter().map(|c| k.unproject(&c.pixel).xy()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = corr.len();
    let mut best: Option<(usize, Pose6D)> = None;
    let mut needed = params.max_iterations;
    let mut it = 0;
    while it < needed.min(params.max_iterations) {
        it += 1;
        let idx = sample(&mut rng, n, 4);
        let sw: Vec<Vector3<f64>> = idx.iter().map(|i| world[i]).collect();
        let sm: Vec<Vector2<f64>> = idx.iter().map(|i| norm[i]).collect();
        let Ok(pose) = epnp(&sw, &sm) else {
            continue;
        };
        let count = inlier_mask(&pose, k, corr, params.inlier_threshold_px)
            .iter()
            .filter(|b| **b)
            .count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, pose));
            needed = adaptive_iterations(count as f64 / n as f64, params.confidence, params.max_iterations);
        }
    }
    let (count, mut pose) = best.ok_or(SlamError::NoConsensus { inliers: 0 })?;
    if count < 4 {
        return Err(SlamError::NoConsensus { inliers: count });
    }
    let mut mask = inlier_mask(&pose, k, corr, params.inlier_threshold_px);
    for _ in 0..3 {
        let subset: Vec<Correspondence> = corr
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(c, _)| *c)
            .collect();
        if subset.len() < 4 {
            return Err(SlamError::NoConsensus { inliers: subset.len() });
        }
        pose = refine_pose(&pose, &subset, k)?.pose;
        let new_mask = inlier_mask(&pose, k, corr, params.inlier_threshold_px);
        if new_mask == mask {
            break;
        }
        mask = new_mask;
    }
    let inliers = mask.iter().filter(|b| **b).count();
    if inliers < 4 {
        return Err(SlamError::NoConsensus { inliers });
    }
    Ok(PnpResult { pose, inliers: mask })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;

    pub fn camera() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    pub fn random_pose(rng: &mut impl Rng) -> Pose6D {
        let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Pose6D::from_axis_angle(w, t)
    }

    /// Points in front of the camera, inside the image.
    pub fn visible_points(rng: &mut impl Rng, pose: &Pose6D, k: &Intrinsics, n: usize) -> Vec<Correspondence> {
        let inv = pose.inverse();
        (0..n)
            .map(|_| {
                let px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                let depth = rng.random_range(2.0..6.0);
                let pc = k.unproject(&px) * depth;
                Correspondence {
                    pixel: px,
                    world: inv.transform(&pc),
                }
            })
            .collect()
    }

    #[test]
    fn noiseless_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = camera();
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let c = visible_points(&mut rng, &pose, &k, 20);
            let r = estimate_pose_pnp(&c, &k, &PnpParams::default()).unwrap();
            assert!(r.pose.rotation_angle_to(&pose) < 1e-6);
            assert!((r.pose.translation - pose.translation).norm() < 1e-6);
            assert_eq!(r.inlier_count(), 20);
        }
    }

    #[test]
    fn planted_outliers_are_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = camera();
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let mut c = visible_points(&mut rng, &pose, &k, 20);
            for o in c.iter_mut().take(6) {
                o.pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            }
            let r = estimate_pose_pnp(&c, &k, &PnpParams::default()).unwrap();
            assert!(r.pose.rotation_angle_to(&pose) < 1e-6);
            assert!((r.pose.translation - pose.translation).norm() < 1e-6);
            for (i, c) in c.iter().enumerate().take(6) {
                let err = residual(&pose, &k, c).map_or(f64::INFINITY, |r| r.norm());
                assert_eq!(r.inliers[i], err < 2.0);
            }
            assert!(r.inliers[6..].iter().all(|b| *b));
        }
    }

    #[test]
    fn too_few_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = camera();
        let c = visible_points(&mut rng, &Pose6D::identity(), &k, 3);
        assert!(matches!(
            estimate_pose_pnp(&c, &k, &PnpParams::default()),
            Err(SlamError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn refine_from_truth_and_from_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = camera();
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let c = visible_points(&mut rng, &pose, &k, 30);
            let same = refine_pose(&pose, &c, &k).unwrap();
            assert!(same.pose.rotation_angle_to(&pose) < 1e-9);
            assert!((same.pose.translation - pose.translation).norm() < 1e-9);
            let axis = Vector3::new(rng.random::<f64>(), rng.random(), rng.random()).normalize();
            let start = pose.perturbed(&(axis * 5f64.to_radians()), &(Vector3::new(1.0, -1.0, 0.5).normalize() * 0.1));
            let r = refine_pose(&start, &c, &k).unwrap();
            assert!(r.pose.rotation_angle_to(&pose) < 1e-6);
            assert!((r.pose.translation - pose.translation).norm() < 1e-6);
            assert!(r.costs.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = camera();
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let c = visible_points(&mut rng, &pose, &k, 1)[0];
            let (jp, jx) = reprojection_jacobians(&pose, &k, &c.world);
            let h = 1e-6;
            let proj = |p: &Pose6D, x: &Vector3<f64>| k.project_camera(&p.transform(x));
            for i in 0..6 {
                let mut d = Vector6::zeros();
                d[i] = h;
                let plus = pose.perturbed(&d.fixed_rows::<3>(0).into_owned(), &d.fixed_rows::<3>(3).into_owned());
                let minus = pose.perturbed(&(-d.fixed_rows::<3>(0).into_owned()), &(-d.fixed_rows::<3>(3).into_owned()));
                let num = (proj(&plus, &c.world) - proj(&minus, &c.world)) / (2.0 * h);
                let ana = jp.column(i);
                assert!((num - ana).norm() <= 1e-5 * ana.norm().max(1.0), "pose column {i}");
            }
            for i in 0..3 {
                let mut d = Vector3::zeros();
                d[i] = h;
                let num = (proj(&pose, &(c.world + d)) - proj(&pose, &(c.world - d))) / (2.0 * h);
                let ana = jx.column(i);
                assert!((num - ana).norm() <= 1e-5 * ana.norm().max(1.0), "point column {i}");
            }
        }
    }
}

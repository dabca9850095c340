//! Sparse bundle adjustment: Levenberg–Marquardt with a Huber loss and the
//! point blocks eliminated by the Schur complement.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3, Vector6};

use super::pnp::reprojection_jacobians;
use super::SlamError;
use crate::geometry::{Intrinsics, Pose6D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaObservation {
    pub pose: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub poses: Vec<Pose6D>,
    /// Poses held constant; at least one anchors the gauge.
    pub fixed: Vec<bool>,
    pub points: Vec<Vector3<f64>>,
    pub observations: Vec<BaObservation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaParams {
    pub huber_delta_px: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for BaParams {
    fn default() -> Self {
        Self {
            huber_delta_px: 2.0,
            max_iterations: 50,
            relative_tolerance: 1e-12,
        }
    }
}

/// Robust cost after each accepted step, starting with the initial cost.
#[derive(Debug, Clone, PartialEq)]
pub struct BaReport {
    pub costs: Vec<f64>,
}

impl BaReport {
    pub fn initial_cost(&self) -> f64 {
        self.costs[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.costs.last().unwrap()
    }
}

/// Huber loss of a residual norm: quadratic inside `δ`, linear outside.
#[inline]
pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        r * r
    } else {
        2.0 * delta * r - delta * delta
    }
}

impl BaProblem {
    pub fn robust_cost(&self, k: &Intrinsics, delta: f64) -> f64 {
        self.observations
            .iter()
            .map(|o| {
                let pc = self.poses[o.pose].transform(&self.points[o.point]);
                if pc.z <= 0.0 {
                    return f64::INFINITY;
                }
                huber((k.project_camera(&pc) - o.pixel).norm(), delta)
            })
            .sum()
    }
}

/// Direction of the global scale ambiguity around the first fixed camera,
/// in the stacked `(ω, t)` / point parameter layout.
fn scale_direction(p: &BaProblem, free: &[Option<usize>], n_free: usize) -> DVector<f64> {
    let mut n = DVector::zeros(6 * n_free + 3 * p.points.len());
    let anchor = p.fixed.iter().position(|f| *f).unwrap_or(0);
    let c0 = p.poses[anchor].camera_center();
    for (i, slot) in free.iter().enumerate() {
        if let Some(s) = slot {
            let d = p.poses[i].translation + p.poses[i].rotation * c0;
            n.fixed_rows_mut::<3>(6 * s + 3).copy_from(&d);
        }
    }
    for (j, x) in p.points.iter().enumerate() {
        n.fixed_rows_mut::<3>(6 * n_free + 3 * j).copy_from(&(x - c0));
    }
    n
}

/// Minimizes the summed Huber reprojection cost in place. Accepted steps
/// never increase the cost.
pub fn solve(problem: &mut BaProblem, k: &Intrinsics, params: &BaParams) -> Result<BaReport, SlamError> {
    let np = problem.points.len();
    let mut free = vec![None; problem.poses.len()];
    let mut n_free = 0;
    for (i, f) in problem.fixed.iter().enumerate() {
        if !f {
            free[i] = Some(n_free);
            n_free += 1;
        }
    }
    if n_free == problem.poses.len() {
        return Err(SlamError::InsufficientObservations("no fixed pose to anchor the gauge".into()));
    }
    let delta = params.huber_delta_px;
    let mut current = problem.robust_cost(k, delta);
    let mut costs = vec![current];
    if !current.is_finite() {
        return Err(SlamError::InsufficientObservations("point behind a camera".into()));
    }
    let mut lambda = 1e-4;
    for _ in 0..params.max_iterations {
        // Normal equations with IRLS weights.
        let mut u = vec![SMatrix::<f64, 6, 6>::zeros(); n_free];
        let mut gc = vec![Vector6::<f64>::zeros(); n_free];
        let mut v = vec![Matrix3::<f64>::zeros(); np];
        let mut gp = vec![Vector3::<f64>::zeros(); np];
        let mut w_blocks: Vec<(usize, usize, SMatrix<f64, 6, 3>)> = Vec::new();
        for o in &problem.observations {
            let pose = &problem.poses[o.pose];
            let x = &problem.points[o.point];
            let pc = pose.transform(x);
            let r = k.project_camera(&pc) - o.pixel;
            let rn = r.norm();
            let wgt = if rn <= delta { 1.0 } else { delta / rn };
            let (jc, jp) = reprojection_jacobians(pose, k, x);
            v[o.point] += wgt * jp.transpose() * jp;
            gp[o.point] += wgt * jp.transpose() * r;
            if let Some(s) = free[o.pose] {
                u[s] += wgt * jc.transpose() * jc;
                gc[s] += wgt * jc.transpose() * r;
                w_blocks.push((s, o.point, wgt * jc.transpose() * jp));
            }
        }
        let grad_norm = gc.iter().map(|g| g.norm_squared()).sum::<f64>() + gp.iter().map(|g| g.norm_squared()).sum::<f64>();
        if grad_norm == 0.0 {
            break;
        }
        let mean_diag = (u.iter().map(|m| m.trace()).sum::<f64>() + v.iter().map(|m| m.trace()).sum::<f64>())
            / (6 * n_free + 3 * np) as f64;
        // Scale is only unobservable when a single pose anchors the gauge.
        let gauge = if problem.poses.len() - n_free == 1 {
            scale_direction(problem, &free, n_free)
        } else {
            DVector::zeros(0)
        };
        let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); np];
        for (i, (_, p, _)) in w_blocks.iter().enumerate() {
            by_point[*p].push(i);
        }
        let mut accepted = false;
        while lambda < 1e10 {
            let damp = lambda * mean_diag;
            let v_inv: Option<Vec<Matrix3<f64>>> = v
                .iter()
                .map(|m| (m + Matrix3::identity() * damp).try_inverse())
                .collect();
            let Some(v_inv) = v_inv else {
                lambda *= 10.0;
                continue;
            };
            let dim = 6 * n_free;
            let mut s = DMatrix::<f64>::zeros(dim, dim);
            let mut b = DVector::<f64>::zeros(dim);
            for (i, ui) in u.iter().enumerate() {
                let mut d = *ui;
                for q in 0..6 {
                    d[(q, q)] += damp;
                }
                s.view_mut((6 * i, 6 * i), (6, 6)).copy_from(&d);
                b.rows_mut(6 * i, 6).copy_from(&(-gc[i]));
            }
            for (j, obs) in by_point.iter().enumerate() {
                let vi = v_inv[j];
                let vg = vi * gp[j];
                for &a in obs {
                    let (ca, _, wa) = &w_blocks[a];
                    let wv = wa * vi;
                    let mut rows = b.rows_mut(6 * ca, 6);
                    rows += wa * vg;
                    for &c in obs {
                        let (cc, _, wc) = &w_blocks[c];
                        let mut blk = s.view_mut((6 * ca, 6 * cc), (6, 6));
                        blk -= wv * wc.transpose();
                    }
                }
            }
            let dc = if dim == 0 {
                Some(DVector::zeros(0))
            } else {
                s.clone().cholesky().map(|c| c.solve(&b)).or_else(|| s.lu().solve(&b))
            };
            let Some(dc) = dc else {
                lambda *= 10.0;
                continue;
            };
            let mut step = DVector::<f64>::zeros(6 * n_free + 3 * np);
            step.rows_mut(0, dim).copy_from(&dc);
            for j in 0..np {
                let mut rhs = -gp[j];
                for &a in &by_point[j] {
                    let (ca, _, wa) = &w_blocks[a];
                    rhs -= wa.transpose() * dc.fixed_rows::<6>(6 * ca);
                }
                step.fixed_rows_mut::<3>(dim + 3 * j).copy_from(&(v_inv[j] * rhs));
            }
            // Remove drift along the scale ambiguity.
            let nn = gauge.norm_squared();
            if nn > 0.0 {
                let c = step.dot(&gauge) / nn;
                step.axpy(-c, &gauge, 1.0);
            }
            if !step.iter().all(|x| x.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let mut candidate = problem.clone();
            for (i, slot) in free.iter().enumerate() {
                if let Some(s) = slot {
                    let d = step.fixed_rows::<6>(6 * s);
                    candidate.poses[i] = candidate.poses[i]
                        .perturbed(&d.fixed_rows::<3>(0).into_owned(), &d.fixed_rows::<3>(3).into_owned());
                }
            }
            for j in 0..np {
                candidate.points[j] += step.fixed_rows::<3>(dim + 3 * j);
            }
            let c_new = candidate.robust_cost(k, delta);
            if c_new <= current {
                let rel = (current - c_new) / current.max(f64::MIN_POSITIVE);
                *problem = candidate;
                current = c_new;
                costs.push(current);
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if rel < params.relative_tolerance {
                    return Ok(BaReport { costs });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    for (p, f) in problem.poses.iter_mut().zip(&problem.fixed) {
        if !f {
            *p = p.orthonormalized();
        }
    }
    Ok(BaReport { costs })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn camera() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// Five cameras sliding along x looking at a cloud of points.
    pub fn synthetic(rng: &mut ChaCha8Rng, n_points: usize) -> BaProblem {
        let k = camera();
        let poses: Vec<Pose6D> = (0..5)
            .map(|i| {
                let eye = Vector3::new(0.3 * i as f64, 0.05 * i as f64, 0.0);
                Pose6D::look_at(eye, eye + Vector3::new(0.1, 0.0, 4.0), -Vector3::y())
            })
            .collect();
        let points: Vec<Vector3<f64>> = (0..n_points)
            .map(|_| Vector3::new(rng.random_range(-1.5..2.5), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0)))
            .collect();
        let mut observations = Vec::new();
        for (i, p) in poses.iter().enumerate() {
            for (j, x) in points.iter().enumerate() {
                let pc = p.transform(x);
                let px = k.project_camera(&pc);
                if pc.z > 0.0 && k.contains(&px) {
                    observations.push(BaObservation { pose: i, point: j, pixel: px });
                }
            }
        }
        BaProblem {
            poses,
            fixed: vec![true, false, false, false, false],
            points,
            observations,
        }
    }

    #[test]
    fn recovers_perturbed_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = camera();
        for _ in 0..5 {
            let truth = synthetic(&mut rng, 120);
            let mut p = truth.clone();
            for pose in p.poses.iter_mut().skip(1) {
                let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                *pose = pose.perturbed(&(axis * 2f64.to_radians()), &(dir * 0.05));
            }
            let report = solve(&mut p, &k, &BaParams::default()).unwrap();
            assert!(report.costs.windows(2).all(|w| w[1] <= w[0]));
            for (a, b) in p.poses.iter().zip(&truth.poses) {
                assert!(a.rotation_angle_to(b) < 1e-4, "rotation {}", a.rotation_angle_to(b));
                assert!((a.camera_center() - b.camera_center()).norm() < 1e-4);
            }
        }
    }

    #[test]
    fn two_anchors_fix_the_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = camera();
        let truth = synthetic(&mut rng, 100);
        let mut p = truth.clone();
        p.fixed = vec![true, true, false, false, false];
        for x in p.points.iter_mut() {
            *x += Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        }
        for pose in p.poses.iter_mut().skip(2) {
            *pose = pose.perturbed(&Vector3::new(0.02, -0.01, 0.015), &Vector3::new(0.03, 0.02, -0.04));
        }
        solve(&mut p, &k, &BaParams::default()).unwrap();
        for (a, b) in p.points.iter().zip(&truth.points) {
            assert!((a - b).norm() < 1e-6, "point off by {}", (a - b).norm());
        }
    }

    #[test]
    fn optimal_input_stays_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = camera();
        let mut p = synthetic(&mut rng, 60);
        let report = solve(&mut p, &k, &BaParams::default()).unwrap();
        assert!((report.initial_cost() - report.final_cost()).abs() < 1e-12);
    }

    #[test]
    fn robust_cost_never_increases_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = camera();
        let mut p = synthetic(&mut rng, 80);
        for o in p.observations.iter_mut().step_by(7) {
            o.pixel += Vector2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
        }
        for x in p.points.iter_mut() {
            *x += Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
        }
        let report = solve(&mut p, &k, &BaParams::default()).unwrap();
        assert!(report.costs.windows(2).all(|w| w[1] <= w[0]));
        assert!(report.final_cost() < report.initial_cost());
    }

    #[test]
    fn huber_is_continuous() {
        assert_eq!(huber(2.0, 2.0), 4.0);
        assert!((huber(2.0 + 1e-9, 2.0) - 4.0).abs() < 1e-8);
        assert_eq!(huber(4.0, 2.0), 12.0);
    }
}

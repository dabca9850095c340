//! Closed-form PnP with control points: four for general point sets, three
//! when the points are (near) coplanar.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector2, Vector3};

use super::SlamError;
use crate::geometry::Pose6D;

/// Below this eigenvalue ratio the point set is treated as planar.
const PLANAR_RATIO: f64 = 1e-10;
/// Below this ratio both the planar and the general solver are tried.
const QUASI_PLANAR_RATIO: f64 = 1e-4;
const COLLINEAR_RATIO: f64 = 1e-10;
const GAUSS_NEWTON_ITERS: usize = 25;
const MULTI_STARTS: usize = 24;

/// Eigen-decomposition of the centered point scatter, axes sorted by
/// decreasing variance.
fn principal(points: &[Vector3<f64>]) -> (Vector3<f64>, [f64; 3], Matrix3<f64>) {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - c;
        a + d * d.transpose()
    });
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let vals = [
        eig.eigenvalues[idx[0]].max(0.0),
        eig.eigenvalues[idx[1]].max(0.0),
        eig.eigenvalues[idx[2]].max(0.0),
    ];
    let axes = Matrix3::from_columns(&[
        eig.eigenvectors.column(idx[0]).into_owned(),
        eig.eigenvectors.column(idx[1]).into_owned(),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ]);
    (c, vals, axes)
}

/// Fails for fewer than four points or collinear points.
pub fn check_configuration(points: &[Vector3<f64>]) -> Result<(), SlamError> {
    if points.len() < 4 {
        return Err(SlamError::DegenerateConfiguration(format!(
            "{} correspondences, need at least 4",
            points.len()
        )));
    }
    let (_, vals, _) = principal(points);
    if vals[0] <= 0.0 || vals[1] <= COLLINEAR_RATIO * vals[0] {
        return Err(SlamError::DegenerateConfiguration("3D points are collinear".into()));
    }
    Ok(())
}

/// EPnP on normalized image coordinates `((u−cx)/fx, (v−cy)/fy)`. Returns
/// the pose with the lowest reprojection error among the candidate
/// solutions.
pub fn epnp(world: &[Vector3<f64>], normalized: &[Vector2<f64>]) -> Result<Pose6D, SlamError> {
    check_configuration(world)?;
    let (c0, vals, axes) = principal(world);
    let ratio = vals[2] / vals[0];
    let mut best: Option<(f64, Pose6D)> = None;
    let mut consider = |sol: Option<Pose6D>| {
        if let Some(p) = sol {
            let e = reprojection_error(&p, world, normalized);
            if best.as_ref().is_none_or(|(be, _)| e < *be) {
                best = Some((e, p));
            }
        }
    };
    if ratio < QUASI_PLANAR_RATIO {
        consider(solve(world, normalized, c0, &vals, &axes, 3));
    }
    if ratio >= PLANAR_RATIO {
        consider(solve(world, normalized, c0, &vals, &axes, 4));
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| SlamError::DegenerateConfiguration("no valid EPnP solution".into()))
}

fn reprojection_error(pose: &Pose6D, world: &[Vector3<f64>], m: &[Vector2<f64>]) -> f64 {
    world
        .iter()
        .zip(m)
        .map(|(x, u)| {
            let pc = pose.transform(x);
            if pc.z <= 0.0 {
                return 1e6;
            }
            (Vector2::new(pc.x / pc.z, pc.y / pc.z) - u).norm()
        })
        .sum::<f64>()
        / world.len() as f64
}

/// Column of `β_a β_b` (a ≤ b) in the product vector
/// `[β0², β0β1, β1², β0β2, β1β2, β2², β0β3, …]`.
#[inline]
fn prod_index(a: usize, b: usize) -> usize {
    b * (b + 1) / 2 + a
}

fn solve(
    world: &[Vector3<f64>],
    m: &[Vector2<f64>],
    c0: Vector3<f64>,
    vals: &[f64; 3],
    axes: &Matrix3<f64>,
    nc: usize,
) -> Option<Pose6D> {
    let n = world.len();
    // Control points and barycentric coordinates.
    let mut ctrl = vec![c0];
    for k in 0..nc - 1 {
        ctrl.push(c0 + axes.column(k) * (vals[k] / n as f64).sqrt());
    }
    let alphas: Vec<Vec<f64>> = if nc == 4 {
        let cc = Matrix3::from_columns(&[ctrl[1] - c0, ctrl[2] - c0, ctrl[3] - c0]);
        let inv = cc.try_inverse()?;
        world
            .iter()
            .map(|p| {
                let a = inv * (p - c0);
                vec![1.0 - a.x - a.y - a.z, a.x, a.y, a.z]
            })
            .collect()
    } else {
        // In-plane coordinates along the two principal axes.
        let (e0, e1) = (ctrl[1] - c0, ctrl[2] - c0);
        world
            .iter()
            .map(|p| {
                let d = p - c0;
                let a1 = d.dot(&e0) / e0.norm_squared();
                let a2 = d.dot(&e1) / e1.norm_squared();
                vec![1.0 - a1 - a2, a1, a2]
            })
            .collect()
    };

    let dim = 3 * nc;
    let mut mtm = DMatrix::<f64>::zeros(dim, dim);
    let mut row = vec![0.0; dim];
    for (a, u) in alphas.iter().zip(m) {
        for (coord, uv) in [(0usize, u.x), (1usize, u.y)] {
            row.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..nc {
                row[3 * j + coord] = a[j];
                row[3 * j + 2] = -a[j] * uv;
            }
            for r in 0..dim {
                if row[r] == 0.0 {
                    continue;
                }
                for c in 0..dim {
                    mtm[(r, c)] += row[r] * row[c];
                }
            }
        }
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let kernel: Vec<DVector<f64>> = order
        .iter()
        .take(nc)
        .map(|i| eig.eigenvectors.column(*i).into_owned())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..nc)
        .flat_map(|a| (a + 1..nc).map(move |b| (a, b)))
        .collect();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| (ctrl[*a] - ctrl[*b]).norm_squared())
        .collect();
    // dv[k][p]: difference of control points a, b of pair p in kernel vector k.
    let dv: Vec<Vec<Vector3<f64>>> = kernel
        .iter()
        .map(|v| {
            pairs
                .iter()
                .map(|(a, b)| {
                    Vector3::new(
                        v[3 * a] - v[3 * b],
                        v[3 * a + 1] - v[3 * b + 1],
                        v[3 * a + 2] - v[3 * b + 2],
                    )
                })
                .collect()
        })
        .collect();
    let nprod = nc * (nc + 1) / 2;
    let mut l = DMatrix::<f64>::zeros(pairs.len(), nprod);
    for p in 0..pairs.len() {
        for b in 0..nc {
            for a in 0..=b {
                let f = if a == b { 1.0 } else { 2.0 };
                l[(p, prod_index(a, b))] = f * dv[a][p].dot(&dv[b][p]);
            }
        }
    }
    let rho_v = DVector::from_vec(rho.clone());

    let mut best: Option<(f64, Pose6D)> = None;
    let mut strategies: Vec<(usize, Vec<usize>)> = Vec::new();
    if nc == 4 {
        strategies.push((4, vec![prod_index(0, 0), prod_index(0, 1), prod_index(0, 2), prod_index(0, 3)]));
        strategies.push((2, vec![prod_index(0, 0), prod_index(0, 1), prod_index(1, 1)]));
        strategies.push((
            3,
            vec![prod_index(0, 0), prod_index(0, 1), prod_index(1, 1), prod_index(0, 2), prod_index(1, 2)],
        ));
    } else {
        strategies.push((1, vec![prod_index(0, 0)]));
        strategies.push((2, vec![prod_index(0, 0), prod_index(0, 1), prod_index(1, 1)]));
        strategies.push((3, vec![prod_index(0, 0), prod_index(0, 1), prod_index(0, 2)]));
    }
    for (nb, cols) in strategies {
        let sub = DMatrix::from_fn(pairs.len(), cols.len(), |r, c| l[(r, cols[c])]);
        let b = sub.svd(true, true).solve(&rho_v, 1e-14).ok()?;
        let mut betas = vec![0.0; 4];
        let b00 = b[0];
        betas[0] = b00.abs().sqrt();
        if betas[0] == 0.0 {
            continue;
        }
        let sign = b00.signum();
        for k in 1..nb {
            if let Some(pos) = cols.iter().position(|c| *c == prod_index(0, k)) {
                betas[k] = sign * b[pos] / betas[0];
            } else if let Some(pos) = cols.iter().position(|c| *c == prod_index(k, k)) {
                let bkk = b[pos];
                betas[k] = if bkk * sign > 0.0 { (bkk * sign).sqrt() } else { 0.0 };
                let cross = cols.iter().position(|c| *c == prod_index(0, k)).map(|p| b[p]);
                if cross.is_some_and(|x| x * sign < 0.0) {
                    betas[k] = -betas[k];
                }
            }
        }
        gauss_newton(&l, &rho, &mut betas[..nb]);
        // With few points the kernel is wider than the strategy; refine
        // over all control-point betas as well.
        let mut full = betas.clone();
        gauss_newton(&l, &rho, &mut full[..nc]);
        for bs in [&betas[..nb], &full[..nc]] {
            if let Some(pose) = pose_from_betas(bs, &kernel, &alphas, world, nc) {
                let e = reprojection_error(&pose, world, m);
                if best.as_ref().is_none_or(|(be, _)| e < *be) {
                    best = Some((e, pose));
                }
            }
        }
    }
    if n < 6 {
        // Minimal sets: the kernel is nc-dimensional and the closed-form
        // starts can sit in the wrong basin. Add fixed pseudo-random starts.
        let mut state = 0x9e37_79b9_7f4a_7c15u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let target: f64 = rho.iter().sum();
        for _ in 0..MULTI_STARTS {
            let mut betas: Vec<f64> = (0..nc).map(|_| next()).collect();
            let mut fit = 0.0;
            for p in 0..rho.len() {
                for bb in 0..nc {
                    for aa in 0..=bb {
                        fit += l[(p, prod_index(aa, bb))] * betas[aa] * betas[bb];
                    }
                }
            }
            if fit <= 0.0 {
                continue;
            }
            let scale = (target / fit).sqrt();
            betas.iter_mut().for_each(|b| *b *= scale);
            gauss_newton(&l, &rho, &mut betas);
            if let Some(pose) = pose_from_betas(&betas, &kernel, &alphas, world, nc) {
                let e = reprojection_error(&pose, world, m);
                if best.as_ref().is_none_or(|(be, _)| e < *be) {
                    best = Some((e, pose));
                }
            }
        }
    }
    best.map(|(_, p)| p)
}

fn gauss_newton(l: &DMatrix<f64>, rho: &[f64], betas: &mut [f64]) {
    let nb = betas.len();
    for _ in 0..GAUSS_NEWTON_ITERS {
        let mut a = DMatrix::<f64>::zeros(rho.len(), nb);
        let mut r = DVector::<f64>::zeros(rho.len());
        for p in 0..rho.len() {
            let mut val = 0.0;
            for bb in 0..nb {
                for aa in 0..=bb {
                    let c = l[(p, prod_index(aa, bb))];
                    val += c * betas[aa] * betas[bb];
                    a[(p, aa)] += c * betas[bb];
                    a[(p, bb)] += c * betas[aa];
                }
            }
            r[p] = rho[p] - val;
        }
        let Ok(dx) = a.svd(true, true).solve(&r, 1e-14) else {
            return;
        };
        for k in 0..nb {
            betas[k] += dx[k];
        }
        if dx.norm() < 1e-15 * (1.0 + betas.iter().map(|b| b.abs()).sum::<f64>()) {
            return;
        }
    }
}

fn pose_from_betas(
    betas: &[f64],
    kernel: &[DVector<f64>],
    alphas: &[Vec<f64>],
    world: &[Vector3<f64>],
    nc: usize,
) -> Option<Pose6D> {
    let mut ccs = vec![Vector3::zeros(); nc];
    for (b, v) in betas.iter().zip(kernel) {
        for (j, c) in ccs.iter_mut().enumerate() {
            *c += Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]) * *b;
        }
    }
    let mut pcs: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| a.iter().zip(&ccs).fold(Vector3::zeros(), |s, (w, c)| s + c * *w))
        .collect();
    let positive = pcs.iter().filter(|p| p.z > 0.0).count();
    if 2 * positive < pcs.len() {
        pcs.iter_mut().for_each(|p| *p = -*p);
    }
    absolute_orientation(world, &pcs)
}

/// Rigid transform `R·w + t ≈ c` in the least-squares sense.
pub fn absolute_orientation(world: &[Vector3<f64>], cam: &[Vector3<f64>]) -> Option<Pose6D> {
    let n = world.len() as f64;
    let cw = world.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cc = cam.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let h = world.iter().zip(cam).fold(Matrix3::zeros(), |a, (w, c)| {
        a + (c - cc) * (w - cw).transpose()
    });
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    if !r.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(Pose6D {
        rotation: r,
        translation: cc - r * cw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_pose(rng: &mut impl Rng) -> Pose6D {
        let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(3.0..6.0));
        Pose6D::from_axis_angle(w, t)
    }

    fn scene(rng: &mut impl Rng, pose: &Pose6D, n: usize, planar: bool) -> (Vec<Vector3<f64>>, Vec<Vector2<f64>>) {
        let inv = pose.inverse();
        let mut w = Vec::new();
        let mut m = Vec::new();
        for _ in 0..n {
            let (x, y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let pw = if planar {
                Vector3::new(x, y, 0.0)
            } else {
                inv.transform(&(Vector3::new(x, y, rng.random_range(-1.0..1.0)) + pose.translation))
            };
            let pc = pose.transform(&pw);
            w.push(pw);
            m.push(Vector2::new(pc.x / pc.z, pc.y / pc.z));
        }
        (w, m)
    }

    #[test]
    fn recovers_general_and_planar() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for planar in [false, true] {
            for n in [4, 6, 20] {
                for _ in 0..50 {
                    let pose = random_pose(&mut rng);
                    let (w, m) = scene(&mut rng, &pose, n, planar);
                    let est = epnp(&w, &m).unwrap();
                    assert!(est.rotation_angle_to(&pose) < 1e-6, "planar={planar} n={n}");
                    assert!((est.translation - pose.translation).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        let w = vec![Vector3::zeros(), Vector3::x(), Vector3::x() * 2.0, Vector3::x() * 3.0];
        let m = vec![Vector2::zeros(); 4];
        assert!(matches!(epnp(&w, &m), Err(SlamError::DegenerateConfiguration(_))));
        assert!(matches!(
            epnp(&w[..3], &m[..3]),
            Err(SlamError::DegenerateConfiguration(_))
        ));
    }
}

//! Planar homographies: normalized DLT and RANSAC.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::slam::pnp::adaptive_iterations;

pub fn apply(h: &Matrix3<f64>, p: &Vector2<f64>) -> Option<Vector2<f64>> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    if q.z.abs() < 1e-15 {
        return None;
    }
    Some(Vector2::new(q.x / q.z, q.y / q.z))
}

/// Scales so that `h[(2,2)] = 1`, or to unit Frobenius norm when that
/// entry vanishes.
pub fn normalized(h: &Matrix3<f64>) -> Matrix3<f64> {
    if h[(2, 2)].abs() > 1e-12 {
        h / h[(2, 2)]
    } else {
        h / h.norm()
    }
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn conditioner(points: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let d = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if d < 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / d;
    Some(Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0))
}

/// Least-squares homography `dst ~ H·src` from four or more pairs.
pub fn fit(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return None;
    }
    let (ts, td) = (conditioner(src)?, conditioner(dst)?);
    let mut a = DMatrix::<f64>::zeros(2 * n.max(5), 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = ts * Vector3::new(s.x, s.y, 1.0);
        let d = td * Vector3::new(d.x, d.y, 1.0);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    // Null vector of AᵀA.
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let h = td.try_inverse()? * hn * ts;
    if !h.iter().all(|v| v.is_finite()) || h.determinant().abs() < 1e-300 {
        return None;
    }
    Some(normalized(&h))
}

/// Levenberg–Marquardt on the summed squared transfer error, with
/// `h[(2,2)]` fixed to 1.
pub fn refine(h: &Matrix3<f64>, src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Matrix3<f64> {
    use nalgebra::{SMatrix, SVector};
    let cost = |h: &Matrix3<f64>| -> f64 { src.iter().zip(dst).map(|(s, d)| transfer_error(h, s, d).powi(2)).sum() };
    let mut h = normalized(h);
    if h[(2, 2)] != 1.0 {
        return h;
    }
    let mut c = cost(&h);
    let mut lambda = 1e-3;
    for _ in 0..50 {
        let mut jtj = SMatrix::<f64, 8, 8>::zeros();
        let mut jtr = SVector::<f64, 8>::zeros();
        for (s, d) in src.iter().zip(dst) {
            let q = h * Vector3::new(s.x, s.y, 1.0);
            if q.z.abs() < 1e-15 {
                continue;
            }
            let (u, v) = (q.x / q.z, q.y / q.z);
            let w = 1.0 / q.z;
            let ju = SVector::<f64, 8>::from_column_slice(&[s.x * w, s.y * w, w, 0.0, 0.0, 0.0, -u * s.x * w, -u * s.y * w]);
            let jv = SVector::<f64, 8>::from_column_slice(&[0.0, 0.0, 0.0, s.x * w, s.y * w, w, -v * s.x * w, -v * s.y * w]);
            let (ru, rv) = (u - d.x, v - d.y);
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let mut improved = false;
        while lambda < 1e10 {
            let mut a = jtj;
            for i in 0..8 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut cand = h;
            for i in 0..8 {
                cand[(i / 3, i % 3)] += step[i];
            }
            let cc = cost(&cand);
            if cc < c {
                let rel = (c - cc) / c.max(1e-300);
                h = cand;
                c = cc;
                lambda = (lambda * 0.1).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    h
}

pub fn transfer_error(h: &Matrix3<f64>, src: &Vector2<f64>, dst: &Vector2<f64>) -> f64 {
    apply(h, src).map_or(f64::INFINITY, |p| (p - dst).norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyParams {
    pub threshold_px: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for HomographyParams {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            confidence: 0.999,
            max_iterations: 2000,
            seed: 0,
        }
    }
}

/// Four-point RANSAC followed by least-squares refits on the inliers.
/// Returns the homography and inlier mask.
pub fn ransac(src: &[Vector2<f64>], dst: &[Vector2<f64>], p: &HomographyParams) -> Option<(Matrix3<f64>, Vec<bool>)> {
    let n = src.len();
    if n < 4 {
        return None;
    }
    let mask_of = |h: &Matrix3<f64>| -> Vec<bool> {
        src.iter()
            .zip(dst)
            .map(|(s, d)| transfer_error(h, s, d) < p.threshold_px)
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    let mut needed = p.max_iterations;
    let mut it = 0;
    while it < needed.min(p.max_iterations) {
        it += 1;
        let idx = sample(&mut rng, n, 4);
        let s: Vec<_> = idx.iter().map(|i| src[i]).collect();
        let d: Vec<_> = idx.iter().map(|i| dst[i]).collect();
        let Some(h) = fit(&s, &d) else {
            continue;
        };
        let count = mask_of(&h).iter().filter(|m| **m).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, h));
            needed = adaptive_iterations(count as f64 / n as f64, p.confidence, p.max_iterations);
        }
    }
    let (_, mut h) = best?;
    let mut mask = mask_of(&h);
    for _ in 0..3 {
        let (s, d): (Vec<_>, Vec<_>) = src
            .iter()
            .zip(dst)
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|((s, d), _)| (*s, *d))
            .unzip();
        let Some(refit) = fit(&s, &d) else {
            break;
        };
        h = refine(&refit, &s, &d);
        let new_mask = mask_of(&h);
        if new_mask == mask {
            break;
        }
        mask = new_mask;
    }
    Some((h, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn planted() -> Matrix3<f64> {
        Matrix3::new(1.1, 0.05, 30.0, -0.08, 0.95, 12.0, 1e-4, -2e-4, 1.0)
    }

    #[test]
    fn exact_fit_from_four_and_many() {
        let h = planted();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [4, 50] {
            let src: Vec<Vector2<f64>> = (0..n)
                .map(|_| Vector2::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)))
                .collect();
            let dst: Vec<_> = src.iter().map(|s| apply(&h, s).unwrap()).collect();
            let est = fit(&src, &dst).unwrap();
            assert!((est - h).abs().max() < 1e-8, "{est}");
        }
    }

    #[test]
    fn ransac_rejects_outliers() {
        let h = planted();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src: Vec<Vector2<f64>> = (0..100)
            .map(|_| Vector2::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)))
            .collect();
        let mut dst: Vec<_> = src.iter().map(|s| apply(&h, s).unwrap()).collect();
        for d in dst.iter_mut().take(40) {
            *d += Vector2::new(rng.random_range(20.0..80.0), rng.random_range(-80.0..-20.0));
        }
        let (est, mask) = ransac(&src, &dst, &HomographyParams::default()).unwrap();
        assert_eq!(mask.iter().filter(|m| **m).count(), 60);
        assert!(mask[..40].iter().all(|m| !m));
        assert!((est - h).abs().max() < 1e-8);
    }

    #[test]
    fn degenerate_input() {
        let p = vec![Vector2::new(1.0, 1.0); 4];
        assert!(fit(&p, &p).is_none());
        assert!(ransac(&p[..3], &p[..3], &HomographyParams::default()).is_none());
    }
}

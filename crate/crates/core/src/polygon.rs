//! Planar polygon helpers: area, convexity, point containment and convex
//! clipping.

use nalgebra::Vector2;

use crate::scalar::Real;

pub type Polygon<T = f64> = Vec<Vector2<T>>;

#[inline]
fn cross<T: Real>(o: &Vector2<T>, a: &Vector2<T>, b: &Vector2<T>) -> T {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Shoelace area, positive for counter-clockwise vertex order (in a y-up
/// frame).
pub fn signed_area<T: Real>(poly: &[Vector2<T>]) -> T {
    let n = poly.len();
    let mut s = T::zero();
    for i in 0..n {
        let (a, b) = (&poly[i], &poly[(i + 1) % n]);
        s += a.x * b.y - b.x * a.y;
    }
    s * T::lit(0.5)
}

pub fn area<T: Real>(poly: &[Vector2<T>]) -> T {
    signed_area(poly).abs()
}

/// True for strictly convex polygons with non-zero area (either winding).
pub fn is_convex<T: Real>(poly: &[Vector2<T>]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut sign = 0i8;
    for i in 0..n {
        let c = cross(&poly[i], &poly[(i + 1) % n], &poly[(i + 2) % n]);
        let s = if c > T::zero() {
            1
        } else if c < T::zero() {
            -1
        } else {
            return false;
        };
        if sign == 0 {
            sign = s;
        } else if s != sign {
            return false;
        }
    }
    // Convex turns everywhere can still wind more than once.
    let total: f64 = (0..n)
        .map(|i| {
            let a = poly[(i + 1) % n] - poly[i];
            let b = poly[(i + 2) % n] - poly[(i + 1) % n];
            let (a, b) = ((a.x.as_f64(), a.y.as_f64()), (b.x.as_f64(), b.y.as_f64()));
            (a.0 * b.1 - a.1 * b.0).atan2(a.0 * b.0 + a.1 * b.1)
        })
        .sum();
    (total.abs() - std::f64::consts::TAU).abs() < 1e-6
}

/// Even-odd containment; points within `tolerance` of an edge count as
/// inside.
pub fn contains<T: Real>(poly: &[Vector2<T>], p: &Vector2<T>, tolerance: T) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (&poly[i], &poly[(i + 1) % n]);
        if segment_distance(a, b, p) <= tolerance {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

pub fn segment_distance<T: Real>(a: &Vector2<T>, b: &Vector2<T>, p: &Vector2<T>) -> T {
    let ab = b - a;
    let l2 = ab.norm_squared();
    if l2 == T::zero() {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / l2).max(T::zero()).min(T::one());
    (a + ab * t - p).norm()
}

fn counter_clockwise<T: Real>(poly: &[Vector2<T>]) -> Polygon<T> {
    let mut v = poly.to_vec();
    if signed_area(&v) < T::zero() {
        v.reverse();
    }
    v
}

/// Intersection of two convex polygons (Sutherland–Hodgman).
pub fn clip_convex<T: Real>(subject: &[Vector2<T>], clip: &[Vector2<T>]) -> Polygon<T> {
    let clip = counter_clockwise(clip);
    let mut out = counter_clockwise(subject);
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let (p, q) = (input[j], input[(j + 1) % m]);
            let (cp, cq) = (cross(&a, &b, &p), cross(&a, &b, &q));
            let (pin, qin) = (cp >= T::zero(), cq >= T::zero());
            if pin {
                out.push(p);
            }
            if pin != qin {
                let t = cp / (cp - cq);
                out.push(p + (q - p) * t);
            }
        }
    }
    out
}

/// Intersection over union of two convex polygons.
pub fn convex_iou<T: Real>(a: &[Vector2<T>], b: &[Vector2<T>]) -> T {
    let inter = area(&clip_convex(a, b));
    let union = area(a) + area(b) - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).max(T::zero()).min(T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(x: f64, y: f64, s: f64) -> Polygon {
        vec![
            Vector2::new(x, y),
            Vector2::new(x + s, y),
            Vector2::new(x + s, y + s),
            Vector2::new(x, y + s),
        ]
    }

    #[test]
    fn shifted_square_iou() {
        let a = square(0.0, 0.0, 1.0);
        let b = square(0.5, 0.0, 1.0);
        assert!((convex_iou(&a, &b) - 0.5 / 1.5).abs() < 1e-12);
        let diag = square(0.5, 0.5, 1.0);
        assert!((convex_iou(&a, &diag) - 0.25 / 1.75).abs() < 1e-12);
        assert_eq!(convex_iou(&a, &a), 1.0);
        assert_eq!(convex_iou(&a, &square(3.0, 0.0, 1.0)), 0.0);
        let af: Vec<Vector2<f32>> = a.iter().map(|p| p.cast()).collect();
        let bf: Vec<Vector2<f32>> = b.iter().map(|p| p.cast()).collect();
        assert!((convex_iou(&af, &bf) - 0.5 / 1.5).abs() < 1e-6);
    }

    #[test]
    fn convexity_and_containment() {
        let s = square(0.0, 0.0, 2.0);
        assert!(is_convex(&s));
        let mut cw = s.clone();
        cw.reverse();
        assert!(is_convex(&cw));
        let bow = vec![s[0], s[2], s[1], s[3]];
        assert!(!is_convex(&bow));
        assert!(contains(&s, &Vector2::new(1.0, 1.0), 0.0));
        assert!(!contains(&s, &Vector2::new(2.5, 1.0), 0.0));
        assert!(contains(&s, &Vector2::new(2.0 + 1e-9, 1.0), 1e-6));
        assert_eq!(area(&s), 4.0);
        assert_eq!(signed_area(&cw), -4.0);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            x in -2.0..2.0f64, y in -2.0..2.0f64, s in 0.1..3.0f64,
            r in 0.0..6.3f64,
        ) {
            let a = square(0.0, 0.0, 1.0);
            let c = Vector2::new(x, y);
            let (sn, cs) = r.sin_cos();
            let b: Polygon = square(-0.5, -0.5, 1.0)
                .iter()
                .map(|p| c + Vector2::new(cs * p.x - sn * p.y, sn * p.x + cs * p.y) * s)
                .collect();
            let ab = convex_iou(&a, &b);
            let ba = convex_iou(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((convex_iou(&b, &b) - 1.0).abs() < 1e-12);
        }
    }
}

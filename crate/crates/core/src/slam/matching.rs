use rayon::prelude::*;

use super::features::Descriptor;

/// Default nearest/second-nearest distance ratio.
pub const DEFAULT_RATIO: f64 = 0.8;

#[inline]
pub fn distance_sq(a: &Descriptor, b: &Descriptor) -> f32 {
    // Independent lanes so the loop vectorizes.
    let mut acc = [0.0f32; 8];
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for i in 0..8 {
            let d = ca[i] - cb[i];
            acc[i] += d * d;
        }
    }
    acc.iter().sum()
}

/// Ratio-test matching with a one-to-one constraint: when several queries
/// claim the same target, the closest claim wins (ties to the lower query
/// index). Returned pairs `(query, target)` are sorted by query.
pub fn match_features(query: &[Descriptor], target: &[Descriptor], ratio: f64) -> Vec<(usize, usize)> {
    if target.is_empty() {
        return Vec::new();
    }
    let r2 = (ratio * ratio) as f32;
    let claims: Vec<Option<(usize, f32)>> = query
        .par_iter()
        .map(|q| {
            let (mut best, mut d1, mut d2) = (0usize, f32::INFINITY, f32::INFINITY);
            for (i, t) in target.iter().enumerate() {
                let d = distance_sq(q, t);
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                    best = i;
                } else if d < d2 {
                    d2 = d;
                }
            }
            (d1 < r2 * d2 || (d2.is_infinite() && d1.is_finite())).then_some((best, d1))
        })
        .collect();
    let mut owner: Vec<Option<(usize, f32)>> = vec![None; target.len()];
    for (qi, c) in claims.iter().enumerate() {
        if let Some((t, d)) = c {
            match owner[*t] {
                Some((_, od)) if od <= *d => {}
                _ => owner[*t] = Some((qi, *d)),
            }
        }
    }
    let mut out: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(t, o)| o.map(|(q, _)| (q, t)))
        .collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slam::features::{normalize, DESCRIPTOR_LEN};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn random_desc(rng: &mut impl rand::Rng) -> Descriptor {
        let n = Normal::new(0.0f32, 1.0).unwrap();
        let mut d = [0.0f32; DESCRIPTOR_LEN];
        d.iter_mut().for_each(|v| *v = n.sample(rng).abs());
        normalize(&mut d);
        d
    }

    #[test]
    fn empty_target() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(match_features(&[random_desc(&mut rng)], &[], 0.8).is_empty());
    }

    #[test]
    fn self_match() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let d: Vec<Descriptor> = (0..50).map(|_| random_desc(&mut rng)).collect();
        let m = match_features(&d, &d, 0.8);
        assert_eq!(m, (0..50).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn planted_noisy_copies() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0f32, 0.05).unwrap();
        let target: Vec<Descriptor> = (0..100).map(|_| random_desc(&mut rng)).collect();
        let query: Vec<Descriptor> = target
            .iter()
            .map(|t| {
                let mut q = *t;
                q.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                normalize(&mut q);
                q
            })
            .collect();
        let m = match_features(&query, &target, 0.8);
        let correct = m.iter().filter(|(q, t)| q == t).count();
        assert!(correct >= 95, "{correct}");
    }

    #[test]
    fn one_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = vec![random_desc(&mut rng), random_desc(&mut rng)];
        let q = vec![t[0], t[0]];
        let m = match_features(&q, &t, 0.9);
        assert_eq!(m, vec![(0, 0)]);
    }
}

//! Vector numerics shared by every other module: distances, norms,
//! nearest-rank quantiles, seeded RNG streams and central-difference
//! gradients.

use std::cmp::Ordering;
use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{OfclError, Result};
use crate::scalar::Scalar;

/// Fixed-dimension feature vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T>(Vec<T>);

impl<T: Scalar> Embedding<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(OfclError::usage(
                "embedding must have at least one component",
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(OfclError::numerical(format!(
                "embedding component {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![T::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    /// Mutable access for optimizers. Callers re-establish finiteness via
    /// [`Embedding::is_finite`] after an update.
    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Embedding<U> {
        Embedding(self.0.iter().map(|&v| U::lit(v.as_f64())).collect())
    }
}

impl<T> Deref for Embedding<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// Quantile level in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantile<T>(T);

impl<T: Scalar> Quantile<T> {
    pub fn new(sigma: T) -> Result<Self> {
        if sigma > T::zero() && sigma <= T::one() {
            Ok(Self(sigma))
        } else {
            Err(OfclError::usage(format!(
                "quantile level {sigma} outside (0, 1]"
            )))
        }
    }

    pub fn sigma(self) -> T {
        self.0
    }
}

fn check_dims<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(OfclError::usage(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )))
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub(crate) fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Euclidean distance without the dimension check, for inner loops whose
/// shapes are already validated.
pub(crate) fn dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    sq_dist(a, b).sqrt()
}

/// Euclidean distance.
pub fn distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_dims(a, b)?;
    Ok(dist(a, b))
}

/// Unit-norm copy of `a`.
pub fn normalize<T: Scalar>(a: &[T]) -> Result<Embedding<T>> {
    let n = norm(a);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(OfclError::degenerate("cannot normalize a zero-norm vector"));
    }
    Embedding::new(a.iter().map(|&v| v / n).collect())
}

pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_dims(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if !(na > T::zero()) || !(nb > T::zero()) {
        return Err(OfclError::degenerate(
            "cosine similarity of a zero-norm vector",
        ));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Nearest-rank quantile: the element at sorted index `ceil(sigma * n) - 1`.
/// Always returns a member of `values`.
pub fn quantile<T: Scalar>(values: &[T], q: Quantile<T>) -> Result<T> {
    if values.is_empty() {
        return Err(OfclError::degenerate("quantile of an empty set"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = sorted.len();
    let rank = (q.sigma().as_f64() * n as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

pub fn mean<T: Scalar>(rows: &[&[T]]) -> Result<Vec<T>> {
    let first = rows
        .first()
        .ok_or_else(|| OfclError::degenerate("mean of an empty list"))?;
    let mut acc = vec![T::zero(); first.len()];
    for row in rows {
        check_dims(first, row)?;
        for (a, &v) in acc.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
    let n = T::from_count(rows.len());
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient<T, F>(mut f: F, at: &[T], h: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    if !(h > T::zero()) {
        return Err(OfclError::usage("finite-difference step must be positive"));
    }
    let mut x = at.to_vec();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(OfclError::numerical(format!(
                "non-finite function value while perturbing coordinate {i}"
            )));
        }
        grad.push((fp - fm) / two_h);
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute error when both
/// vectors are (numerically) zero.
pub fn relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> T {
    let diff: Vec<T> = analytic.iter().zip(numeric).map(|(&a, &b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale > T::lit(1e-8) {
        norm(&diff) / scale
    } else {
        norm(&diff)
    }
}

/// Deterministic RNG for a named stream derived from a base seed.
pub fn seeded_rng(base: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(base, stream))
}

/// SplitMix64 fold of `base` with each stream tag.
pub fn mix_seed(base: u64, stream: &[u64]) -> u64 {
    let mut s = base;
    for &tag in stream {
        s = splitmix(s ^ splitmix(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    splitmix(s)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(s: f64) -> Quantile<f64> {
        Quantile::new(s).unwrap()
    }

    #[test]
    fn distance_examples() {
        let x = [0.3, -1.2, 4.0];
        assert_eq!(distance(&x, &x).unwrap(), 0.0);
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        // sqrt(1 + 4)
        let d: f64 = distance(&[1.0, 1.0], &[2.0, 3.0]).unwrap();
        assert!((d - 2.236_067_977_499_79).abs() < 1e-12);
        assert!(matches!(
            distance(&[1.0], &[1.0, 2.0]),
            Err(OfclError::Usage(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[3.0, 4.0]).unwrap().as_slice(), &[0.6, 0.8]);
        assert_eq!(
            normalize(&[1.0, 0.0, 0.0]).unwrap().as_slice(),
            &[1.0, 0.0, 0.0]
        );
        let r = normalize(&[2.0, 2.0]).unwrap();
        let inv_sqrt2 = 1.0 / 2f64.sqrt();
        assert!((r[0] - inv_sqrt2).abs() < 1e-12 && (r[1] - inv_sqrt2).abs() < 1e-12);
        assert!(matches!(
            normalize(&[0.0, 0.0]),
            Err(OfclError::Degenerate(_))
        ));
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0], q(0.5)).unwrap(), 2.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], q(1.0)).unwrap(), 3.0);
        assert_eq!(quantile(&[5.0, 1.0, 9.0, 3.0], q(0.25)).unwrap(), 1.0);
        assert!(matches!(
            quantile::<f64>(&[], q(0.5)),
            Err(OfclError::Degenerate(_))
        ));
        assert!(Quantile::new(0.0).is_err());
        assert!(Quantile::new(1.0 + 1e-12).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|x: &[f64]| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);

        let g = finite_difference_gradient(|x: &[f64]| x.iter().sum(), &[0.2, -7.0, 3.5], 1e-5)
            .unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }

        let g = finite_difference_gradient(|x: &[f64]| x[0] * x[1], &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);

        let err = finite_difference_gradient(|x: &[f64]| 1.0 / x[0], &[1e-5], 1e-5);
        assert!(matches!(err, Err(OfclError::Numerical(_))));
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
        assert!(Embedding::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn seeded_streams_are_distinct_and_stable() {
        assert_eq!(mix_seed(7, &[1, 2]), mix_seed(7, &[1, 2]));
        assert_ne!(mix_seed(7, &[1, 2]), mix_seed(7, &[2, 1]));
        assert_ne!(mix_seed(7, &[]), mix_seed(8, &[]));
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 3)
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in vec3(), b in vec3(), c in vec3()) {
            let ab = distance(&a, &b).unwrap();
            prop_assert_eq!(ab, distance(&b, &a).unwrap());
            prop_assert_eq!(distance(&a, &a).unwrap(), 0.0);
            let ac = distance(&a, &c).unwrap();
            let cb = distance(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
        }

        #[test]
        fn normalize_is_idempotent(a in vec3()) {
            prop_assume!(norm(&a) > 1e-6);
            let once = normalize(&a).unwrap();
            prop_assert!((norm(&once) - 1.0).abs() < 1e-9);
            let twice = normalize(&once).unwrap();
            for (x, y) in once.iter().zip(twice.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn quantile_is_member_and_monotone(
            values in prop::collection::vec(-100.0f64..100.0, 1..40),
            s1 in 0.001f64..1.0,
            s2 in 0.001f64..1.0,
        ) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let a = quantile(&values, q(lo)).unwrap();
            let b = quantile(&values, q(hi)).unwrap();
            prop_assert!(values.contains(&a));
            prop_assert!(a <= b);
            let max = values.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(quantile(&values, q(1.0)).unwrap(), max);
        }
    }
}

//! Scalar abstraction for the numeric core.
//!
//! Every quantity downstream (schedules, mixtures, samplers, audits) is
//! generic over [`Real`] so the same code runs in f32 and f64. f64 is the
//! working precision for experiments; the f32 instantiation exists to keep
//! precision assumptions explicit rather than accidental.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::StandardNormal;

pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Draws one standard normal variate.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Converts an f64 literal. Panics only when the literal is not
    /// representable, which is a programming error, not a data error.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal must be representable in the scalar type")
    }

    /// Tolerance for validating quantities that must sum to one (mixture
    /// and score-combination weights). Scales with the epsilon of the
    /// scalar type: ~9e-13 for f64.
    fn weight_tol() -> Self {
        Self::epsilon() * Self::lit(4096.0)
    }
}

impl Real for f32 {
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Real for f64 {
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

/// log(sum(exp(v))) with the usual max shift; -inf for an empty slice.
pub(crate) fn logsumexp<T: Real>(vals: &[T]) -> T {
    let mut hi = T::neg_infinity();
    for &v in vals {
        if v > hi {
            hi = v;
        }
    }
    if !hi.is_finite() {
        return hi;
    }
    let sum = vals.iter().map(|&v| (v - hi).exp()).sum::<T>();
    hi + sum.ln()
}

pub(crate) fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

pub(crate) fn l2_dist<T: Real>(a: &[T], b: &[T]) -> T {
    sq_dist(a, b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_direct_sum() {
        let vals = [0.3f64, -1.2, 2.0];
        let direct: f64 = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((logsumexp(&vals) - direct).abs() < 1e-14);
    }

    #[test]
    fn logsumexp_survives_large_magnitudes() {
        let vals = [-1100.0f64, -1101.0];
        let got = logsumexp(&vals);
        let expect = -1100.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn literals_convert_in_both_precisions() {
        assert_eq!(f64::lit(0.5), 0.5);
        assert_eq!(f32::lit(0.5), 0.5f32);
    }
}

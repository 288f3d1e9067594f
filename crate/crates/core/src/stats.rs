//! Two-sample energy statistics, permutation testing, and bootstrap
//! summaries used by the distributional checks and the auditors.
//!
//! The squared energy distance between samples X (size n) and Y (size m) is
//! 2A - B - C with A the mean cross distance, B and C the mean within-sample
//! distances. The 1D path runs in O(n log n) via sorting and prefix sums and
//! agrees with the quadratic formula exactly; the general-d path is the
//! plain O(n^2) double loop.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::{purpose, stream};

/// Mean pairwise |x - y| within one sample, from its sorted order:
/// sum over ordered pairs equals sum_k x_(k) (2k + 1 - n).
fn mean_within_sorted<T: Real>(sorted: &[T]) -> T {
    let n = sorted.len();
    if n < 2 {
        return T::zero();
    }
    let mut acc = T::zero();
    for (k, &v) in sorted.iter().enumerate() {
        let coeff = T::lit(2.0 * k as f64 + 1.0 - n as f64);
        acc += coeff * v;
    }
    // acc counts each unordered pair once; the mean uses all n^2 ordered
    // pairs including zero self-distances.
    acc * T::lit(2.0) / T::lit((n * n) as f64)
}

/// Mean cross distance between two samples given both sorted: for each y,
/// sum_i |x_i - y| from prefix sums of the sorted x.
fn mean_cross_sorted<T: Real>(xs: &[T], ys: &[T], prefix: &[T]) -> T {
    let n = xs.len();
    let total = prefix[n];
    let mut acc = T::zero();
    for &y in ys {
        let c = xs.partition_point(|&v| v <= y);
        let below = prefix[c];
        let cf = T::lit(c as f64);
        let nf = T::lit((n - c) as f64);
        acc += y * cf - below + (total - below) - y * nf;
    }
    acc / T::lit((n * ys.len()) as f64)
}

fn sorted_copy<T: Real>(xs: &[T]) -> Vec<T> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample value"));
    v
}

/// Squared energy distance estimate 2A - B - C for 1D samples, O(n log n).
pub fn energy_distance_1d<T: Real>(xs: &[T], ys: &[T]) -> Result<T> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::config("samples", "energy distance needs non-empty samples"));
    }
    let sx = sorted_copy(xs);
    let sy = sorted_copy(ys);
    let mut prefix = Vec::with_capacity(sx.len() + 1);
    prefix.push(T::zero());
    for &v in &sx {
        let last = *prefix.last().expect("prefix is non-empty");
        prefix.push(last + v);
    }
    let a = mean_cross_sorted(&sx, &sy, &prefix);
    let b = mean_within_sorted(&sx);
    let c = mean_within_sorted(&sy);
    Ok(T::lit(2.0) * a - b - c)
}

/// Squared energy distance estimate 2A - B - C for d-dimensional samples,
/// O((n + m)^2) with Euclidean norms.
pub fn energy_distance<T: Real>(xs: &[Vec<T>], ys: &[Vec<T>]) -> Result<T> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::config("samples", "energy distance needs non-empty samples"));
    }
    let d = xs[0].len();
    for v in xs.iter().chain(ys) {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                context: "energy distance sample",
                expected: d,
                actual: v.len(),
            });
        }
    }
    let dist = |a: &[T], b: &[T]| -> T {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            .sqrt()
    };
    let mut a = T::zero();
    for x in xs {
        for y in ys {
            a += dist(x, y);
        }
    }
    a /= T::lit((xs.len() * ys.len()) as f64);
    let mean_within = |s: &[Vec<T>]| -> T {
        let mut acc = T::zero();
        for i in 0..s.len() {
            for j in (i + 1)..s.len() {
                acc += dist(&s[i], &s[j]);
            }
        }
        acc * T::lit(2.0) / T::lit((s.len() * s.len()) as f64)
    };
    Ok(T::lit(2.0) * a - mean_within(xs) - mean_within(ys))
}

/// nm/(n+m) times the squared energy distance: the conventional two-sample
/// test statistic.
fn test_statistic_1d<T: Real>(xs: &[T], ys: &[T]) -> Result<T> {
    let n = xs.len() as f64;
    let m = ys.len() as f64;
    Ok(T::lit(n * m / (n + m)) * energy_distance_1d(xs, ys)?)
}

#[derive(Debug, Clone, Copy)]
pub struct EnergyTestResult<T> {
    pub statistic: T,
    pub p_value: f64,
    pub permutations: usize,
}

impl<T> EnergyTestResult<T> {
    /// The test fails to reject equality at the given significance level.
    pub fn passes_at(&self, significance: f64) -> bool {
        self.p_value >= significance
    }
}

/// Permutation two-sample energy test for 1D samples. The p-value is
/// (1 + #{permuted statistic >= observed}) / (permutations + 1); labels are
/// reshuffled with a stream derived from the seed, so results are
/// reproducible.
pub fn energy_two_sample_test_1d<T: Real>(
    xs: &[T],
    ys: &[T],
    permutations: usize,
    seed: u64,
) -> Result<EnergyTestResult<T>> {
    if permutations == 0 {
        return Err(Error::config("permutations", "need at least one permutation"));
    }
    let observed = test_statistic_1d(xs, ys)?;
    let mut pooled: Vec<T> = xs.iter().chain(ys).copied().collect();
    let n = xs.len();
    let mut exceed = 0usize;
    for b in 0..permutations {
        let mut rng = stream(seed, &[purpose::PERMUTATION, b as u64]);
        pooled.shuffle(&mut rng);
        let stat = test_statistic_1d(&pooled[..n], &pooled[n..])?;
        if stat >= observed {
            exceed += 1;
        }
    }
    Ok(EnergyTestResult {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (permutations + 1) as f64,
        permutations,
    })
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BootstrapCi<T> {
    pub mean: T,
    pub lo: T,
    pub hi: T,
    pub replicates: usize,
}

/// Percentile bootstrap confidence interval for the sample mean.
pub fn bootstrap_mean_ci<T: Real>(
    samples: &[T],
    replicates: usize,
    confidence: f64,
    seed: u64,
) -> Result<BootstrapCi<T>> {
    if samples.is_empty() {
        return Err(Error::config("samples", "bootstrap needs non-empty samples"));
    }
    if replicates < 2 {
        return Err(Error::config("replicates", "need at least two bootstrap replicates"));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::config("confidence", "must lie strictly inside (0, 1)"));
    }
    let n = samples.len();
    let nf = T::lit(n as f64);
    let mean = samples.iter().copied().sum::<T>() / nf;
    let mut means = Vec::with_capacity(replicates);
    for b in 0..replicates {
        let mut rng = stream(seed, &[purpose::BOOTSTRAP, b as u64]);
        let mut acc = T::zero();
        for _ in 0..n {
            acc += samples[rng.gen_range(0..n)];
        }
        means.push(acc / nf);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("non-finite bootstrap mean"));
    let tail = (1.0 - confidence) / 2.0;
    Ok(BootstrapCi {
        mean,
        lo: percentile(&means, tail),
        hi: percentile(&means, 1.0 - tail),
        replicates,
    })
}

/// Linear-interpolation percentile of an ascending-sorted slice, q in [0, 1].
pub fn percentile<T: Real>(sorted: &[T], q: f64) -> T {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile must be in [0, 1]");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

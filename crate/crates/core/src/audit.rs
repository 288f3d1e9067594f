//! Near-access-freeness auditing: MMSE-based log-probability estimation,
//! per-sample log-ratios, closed-form and bound-form divergence budgets,
//! and histogram summaries.
//!
//! The log-probability estimator integrates the Monte-Carlo denoiser MSE
//! against the log-SNR slope over the schedule grid. Its additive constant
//! is never pinned (it absorbs the boundary layers at both ends of the
//! grid), so only differences of estimates are meaningful; every consumer
//! in this module works with differences, and the noise streams are keyed
//! by grid index alone so that two estimates under the same seed share
//! their draws exactly (common random numbers).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cpr::ChoicePlan;
use crate::dist::GaussianMixture;
use crate::error::{Error, Result};
use crate::num::{logsumexp, Real};
use crate::rng::{purpose, stream};
use crate::sampler::{ModelChoice, SamplerConfig, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::score::{DenoiserFn, ScoreFn};
use crate::stats::{bootstrap_mean_ci, BootstrapCi};

pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

/// Log-probability up to a shared additive constant, with its Monte-Carlo
/// error. Comparable across calls only when schedule and seed match.
#[derive(Debug, Clone, Copy)]
pub struct LogProbEstimate<T> {
    pub value: T,
    pub stderr: T,
    pub draws: usize,
    pub grid_points: usize,
}

/// Per-antithetic-pair totals of the integral 1/2 * sum_i w_i alpha'_i *
/// mse_i, where mse_i is the pair-mean squared denoiser error at grid point
/// i. Pairs are i.i.d. replicates of the whole integral, so their spread is
/// an honest standard error even after differencing two calls.
fn pair_totals<T: Real>(
    denoiser: &(impl DenoiserFn<T> + ?Sized),
    x0: &[T],
    schedule: &NoiseSchedule<T>,
    pairs: usize,
    seed: u64,
) -> Result<Vec<T>> {
    let n = schedule.num_steps();
    let dim = x0.len();
    let h = (T::one() - schedule.t_min()) / T::from_usize(n - 1).unwrap();
    let half = T::lit(0.5);
    let mut totals = vec![T::zero(); pairs];
    let mut x_t = vec![T::zero(); dim];
    for i in 0..n {
        let gamma = schedule.gamma(i);
        let sigma = schedule.sigma(i);
        let slope = schedule.log_snr_slope(i).value;
        let w = if i == 0 || i == n - 1 { h * half } else { h };
        let coeff = half * w * slope;
        let mut rng = stream(seed, &[purpose::AUDIT_NOISE, i as u64]);
        for total in totals.iter_mut() {
            let eps: Vec<T> = (0..dim).map(|_| T::std_normal(&mut rng)).collect();
            let mut pair_mse = T::zero();
            for sign in [T::one(), -T::one()] {
                for j in 0..dim {
                    x_t[j] = gamma * x0[j] + sign * sigma * eps[j];
                }
                let eps_hat = denoiser.eval(&x_t, i)?;
                for j in 0..dim {
                    let r = sign * eps[j] - eps_hat[j];
                    pair_mse += r * r;
                }
            }
            *total += coeff * half * pair_mse;
        }
    }
    Ok(totals)
}

fn summarize<T: Real>(totals: &[T], grid_points: usize) -> LogProbEstimate<T> {
    let m = totals.len();
    let mf = T::from_usize(m).unwrap();
    let value = totals.iter().copied().sum::<T>() / mf;
    let stderr = if m < 2 {
        T::infinity()
    } else {
        let var = totals
            .iter()
            .map(|&v| (v - value) * (v - value))
            .sum::<T>()
            / T::from_usize(m - 1).unwrap();
        (var / mf).sqrt()
    };
    LogProbEstimate {
        value,
        stderr,
        draws: 2 * m,
        grid_points,
    }
}

/// Log-probability of a data point up to a shared additive constant:
/// trapezoid quadrature over the schedule grid of the Monte-Carlo denoiser
/// MSE times the log-SNR slope, halved. Noise draws come in antithetic
/// pairs; `draws` is rounded up to the next even count.
pub fn mmse_log_prob<T: Real>(
    denoiser: &(impl DenoiserFn<T> + ?Sized),
    x0: &[T],
    schedule: &NoiseSchedule<T>,
    draws: usize,
    seed: u64,
) -> Result<LogProbEstimate<T>> {
    if draws == 0 {
        return Err(Error::config("draws", "need at least one noise draw"));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("x0", "point must be finite"));
    }
    let pairs = draws.div_ceil(2);
    let totals = pair_totals(denoiser, x0, schedule, pairs, seed)?;
    Ok(summarize(&totals, schedule.num_steps()))
}

/// Difference of two log-probability estimates with shared noise draws and
/// a per-pair standard error of the difference itself. The shared additive
/// constant cancels, so this is a consistent estimate of
/// log p_a(x0_a) - log p_b(x0_b) up to quadrature bias.
pub fn mmse_log_prob_diff<T: Real>(
    a: &(impl DenoiserFn<T> + ?Sized),
    x0_a: &[T],
    b: &(impl DenoiserFn<T> + ?Sized),
    x0_b: &[T],
    schedule: &NoiseSchedule<T>,
    draws: usize,
    seed: u64,
) -> Result<LogProbEstimate<T>> {
    if draws == 0 {
        return Err(Error::config("draws", "need at least one noise draw"));
    }
    if x0_a.len() != x0_b.len() {
        return Err(Error::DimensionMismatch {
            context: "log-prob difference points",
            expected: x0_a.len(),
            actual: x0_b.len(),
        });
    }
    if x0_a.iter().chain(x0_b).any(|v| !v.is_finite()) {
        return Err(Error::config("x0", "points must be finite"));
    }
    let pairs = draws.div_ceil(2);
    let ta = pair_totals(a, x0_a, schedule, pairs, seed)?;
    let tb = pair_totals(b, x0_b, schedule, pairs, seed)?;
    let diffs: Vec<T> = ta.iter().zip(&tb).map(|(&x, &y)| x - y).collect();
    Ok(summarize(&diffs, schedule.num_steps()))
}

/// Exact per-sample log-ratios log p(x) - log safe(x) from analytic data
/// densities.
pub fn delta_max_exact<T: Real>(
    p: &GaussianMixture<T>,
    safe: &GaussianMixture<T>,
    xs: &[Vec<T>],
) -> Result<Vec<T>> {
    xs.iter()
        .map(|x| Ok(p.log_density(x)? - safe.log_density(x)?))
        .collect()
}

/// Estimated per-sample log-ratios through the MMSE estimator with matched
/// noise draws for the two models.
pub fn delta_max_estimated<T: Real>(
    p: &(impl DenoiserFn<T> + ?Sized),
    safe: &(impl DenoiserFn<T> + ?Sized),
    schedule: &NoiseSchedule<T>,
    xs: &[Vec<T>],
    draws: usize,
    seed: u64,
) -> Result<Vec<LogProbEstimate<T>>> {
    xs.iter()
        .map(|x| mmse_log_prob_diff(p, x, safe, x, schedule, draws, seed))
        .collect()
}

/// KL-form divergence budget k_c = -2 log BC(q1, q2), where BC is the
/// Bhattacharyya coefficient (one minus the squared Hellinger distance).
/// Closed form when both mixtures are single Gaussians, grid quadrature in
/// one or two dimensions otherwise.
pub fn k_c_hellinger<T: Real>(q1: &GaussianMixture<T>, q2: &GaussianMixture<T>) -> Result<T> {
    if q1.dim() != q2.dim() {
        return Err(Error::DimensionMismatch {
            context: "Hellinger budget",
            expected: q1.dim(),
            actual: q2.dim(),
        });
    }
    if q1.components().len() == 1 && q2.components().len() == 1 {
        let a = &q1.components()[0];
        let b = &q2.components()[0];
        let mut log_bc = T::zero();
        let quarter = T::lit(0.25);
        let half = T::lit(0.5);
        for j in 0..q1.dim() {
            let v1 = a.cov_diag[j];
            let v2 = b.cov_diag[j];
            let dm = a.mean[j] - b.mean[j];
            let vs = v1 + v2;
            log_bc += half * (T::lit(2.0) * (v1 * v2).sqrt() / vs).ln() - quarter * dm * dm / vs;
        }
        return Ok(-T::lit(2.0) * log_bc);
    }
    k_c_hellinger_quadrature(q1, q2)
}

/// Quadrature form of [`k_c_hellinger`], exposed so closed-form values can
/// be cross-checked. Supported in one and two dimensions.
pub fn k_c_hellinger_quadrature<T: Real>(
    q1: &GaussianMixture<T>,
    q2: &GaussianMixture<T>,
) -> Result<T> {
    if q1.dim() != q2.dim() {
        return Err(Error::DimensionMismatch {
            context: "Hellinger budget",
            expected: q1.dim(),
            actual: q2.dim(),
        });
    }
    let dim = q1.dim();
    let axis_span = |axis: usize| {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for c in q1.components().iter().chain(q2.components()) {
            let s = c.cov_diag[axis].sqrt() * T::lit(12.0);
            lo = lo.min(c.mean[axis] - s);
            hi = hi.max(c.mean[axis] + s);
        }
        (lo, hi)
    };
    let half = T::lit(0.5);
    match dim {
        1 => {
            let (lo, hi) = axis_span(0);
            let n = 20_000usize;
            let h = (hi - lo) / T::from_usize(n).unwrap();
            let mut logs = Vec::with_capacity(n + 1);
            for i in 0..=n {
                let x = [lo + T::from_usize(i).unwrap() * h];
                let l = half * (q1.log_density(&x)? + q2.log_density(&x)?);
                let w = if i == 0 || i == n { half * h } else { h };
                logs.push(l + w.ln());
            }
            Ok(-T::lit(2.0) * logsumexp(&logs))
        }
        2 => {
            let (lo_x, hi_x) = axis_span(0);
            let (lo_y, hi_y) = axis_span(1);
            let n = 500usize;
            let hx = (hi_x - lo_x) / T::from_usize(n).unwrap();
            let hy = (hi_y - lo_y) / T::from_usize(n).unwrap();
            let mut logs = Vec::with_capacity((n + 1) * (n + 1));
            for i in 0..=n {
                let wx = if i == 0 || i == n { half * hx } else { hx };
                for j in 0..=n {
                    let wy = if j == 0 || j == n { half * hy } else { hy };
                    let x = [
                        lo_x + T::from_usize(i).unwrap() * hx,
                        lo_y + T::from_usize(j).unwrap() * hy,
                    ];
                    let l = half * (q1.log_density(&x)? + q2.log_density(&x)?);
                    logs.push(l + (wx * wy).ln());
                }
            }
            Ok(-T::lit(2.0) * logsumexp(&logs))
        }
        d => Err(Error::Unsupported(format!(
            "Hellinger quadrature covers 1 or 2 dimensions, got {d}; higher dims need single-Gaussian closed forms"
        ))),
    }
}

/// Discrete divergence budget for a materialized step set: b times the sum
/// of inverse transition variances over the private steps. `sigmas` is the
/// per-execution-step transition noise scale; a zero entry inside J means
/// the step has a deterministic kernel and no density-ratio budget exists.
pub fn k_c_bound_from_sigmas<T: Real>(j: &BTreeSet<usize>, sigmas: &[T], b: T) -> Result<T> {
    if !(b.is_finite() && b >= T::zero()) {
        return Err(Error::config("b", "per-step gap bound must be non-negative"));
    }
    let mut sum = T::zero();
    for &k in j {
        let sigma = *sigmas.get(k).ok_or_else(|| {
            Error::config("plan", format!("step index {k} outside 0..{}", sigmas.len()))
        })?;
        if sigma == T::zero() {
            return Err(Error::Schedule(format!(
                "step {k} has a deterministic transition; the discrete budget needs noise at every private step"
            )));
        }
        sum += (sigma * sigma).recip();
    }
    Ok(b * sum)
}

/// Discrete budget for a static choice plan under a sampler configuration.
/// Adaptive plans must first be materialized from recorded choices.
pub fn k_c_choose_bound<T: Real>(
    plan: &ChoicePlan,
    config: &SamplerConfig<T>,
    b: T,
) -> Result<T> {
    let n = config.num_transitions();
    plan.validate(n)?;
    let j: BTreeSet<usize> = match plan {
        ChoicePlan::Explicit(set) => set.clone(),
        ChoicePlan::Alternate { .. } => (0..n)
            .filter(|&k| plan.private_at(k) == Some(true))
            .collect(),
        ChoicePlan::MinMse { .. } => {
            return Err(Error::config(
                "plan",
                "adaptive plans must be materialized from recorded choices",
            ));
        }
    };
    k_c_bound_from_sigmas(&j, &config.transition_sigmas(), b)
}

/// One private step's contribution to a trajectory log-ratio.
#[derive(Debug, Clone, Copy)]
pub struct StepTerm<T> {
    pub exec: usize,
    /// (||x' - mu_safe||^2 - ||x' - mu_private||^2) / 2, the transition
    /// log-density gap before dividing by the step variance.
    pub numerator: T,
    pub sigma: T,
}

#[derive(Debug, Clone)]
pub struct TrajectoryLogRatio<T> {
    pub total: T,
    pub steps: Vec<StepTerm<T>>,
}

/// Exact log-ratio of a recorded choice trajectory's density under its own
/// transition kernels versus the all-safe kernels. Steps outside J use the
/// safe kernel on both sides and contribute zero, so only private steps are
/// listed.
pub fn choose_trajectory_log_ratio<T, S1, S2>(
    trajectory: &Trajectory<T>,
    safe: &S1,
    private: &S2,
    config: &SamplerConfig<T>,
) -> Result<TrajectoryLogRatio<T>>
where
    T: Real,
    S1: ScoreFn<T> + ?Sized,
    S2: ScoreFn<T> + ?Sized,
{
    let choices = trajectory
        .choices
        .as_ref()
        .ok_or_else(|| Error::config("trajectory", "no recorded model choices"))?;
    let n = config.schedule.num_steps();
    if choices.len() != config.num_transitions()
        || trajectory.states.len() != config.num_transitions() + 1
    {
        return Err(Error::config(
            "trajectory",
            "recorded shape does not match the sampler configuration",
        ));
    }
    let half = T::lit(0.5);
    let mut total = T::zero();
    let mut steps = Vec::new();
    for (k, choice) in choices.iter().enumerate() {
        if *choice != ModelChoice::Private {
            continue;
        }
        let from = n - 1 - k;
        let coeffs = config.schedule.step_coefficients(from, config.kind);
        if coeffs.sigma == T::zero() {
            return Err(Error::Schedule(format!(
                "private step {k} has a deterministic transition; its log-ratio is unbounded"
            )));
        }
        let x = &trajectory.states[k].1;
        let x_next = &trajectory.states[k + 1].1;
        let s_safe = safe.eval(x, from)?;
        let s_private = private.eval(x, from)?;
        let mut num = T::zero();
        for j in 0..x.len() {
            let mu_safe = coeffs.alpha1 * x[j] + coeffs.alpha2 * s_safe[j];
            let mu_private = coeffs.alpha1 * x[j] + coeffs.alpha2 * s_private[j];
            let rs = x_next[j] - mu_safe;
            let rp = x_next[j] - mu_private;
            num += half * (rs * rs - rp * rp);
        }
        total += num / (coeffs.sigma * coeffs.sigma);
        steps.push(StepTerm {
            exec: k,
            numerator: num,
            sigma: coeffs.sigma,
        });
    }
    Ok(TrajectoryLogRatio { total, steps })
}

/// Estimate the per-step gap bound b as the largest observed numerator over
/// a batch of audited trajectories, floored at zero so the resulting budget
/// stays a valid upper bound.
pub fn estimate_step_gap_bound<T, S1, S2>(
    trajectories: &[Trajectory<T>],
    safe: &S1,
    private: &S2,
    config: &SamplerConfig<T>,
) -> Result<T>
where
    T: Real,
    S1: ScoreFn<T> + ?Sized,
    S2: ScoreFn<T> + ?Sized,
{
    let mut b = T::zero();
    for trajectory in trajectories {
        let ratio = choose_trajectory_log_ratio(trajectory, safe, private, config)?;
        for step in ratio.steps {
            b = b.max(step.numerator);
        }
    }
    Ok(b)
}

/// Monte-Carlo estimate of KL(p || safe) from samples of p with exact data
/// densities on both sides, reported with a percentile-bootstrap CI.
pub fn delta_kl_estimate<T: Real>(
    samples: &[Vec<T>],
    p: &GaussianMixture<T>,
    safe: &GaussianMixture<T>,
    replicates: usize,
    confidence: f64,
    seed: u64,
) -> Result<BootstrapCi<T>> {
    if samples.len() < 1000 {
        return Err(Error::config(
            "samples",
            format!("KL estimation needs at least 1000 samples, got {}", samples.len()),
        ));
    }
    let ratios: Vec<T> = samples
        .iter()
        .map(|x| Ok(p.log_density(x)? - safe.log_density(x)?))
        .collect::<Result<_>>()?;
    bootstrap_mean_ci(&ratios, replicates, confidence, seed)
}

/// Uniform-bin histogram; `edges` has one more entry than `counts`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram<T> {
    pub edges: Vec<T>,
    pub counts: Vec<u64>,
}

impl<T> Histogram<T> {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// 50-bin-style uniform histogram over the observed range; a degenerate
/// range (all values equal) is widened to a unit interval around the value.
pub fn histogram<T: Real>(values: &[T], bins: usize) -> Result<Histogram<T>> {
    if values.is_empty() {
        return Err(Error::config("values", "histogram needs at least one value"));
    }
    if bins == 0 {
        return Err(Error::config("bins", "need at least one bin"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("values", "histogram input must be finite"));
    }
    let mut lo = values[0];
    let mut hi = values[0];
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        lo -= T::lit(0.5);
        hi += T::lit(0.5);
    }
    let nb = T::from_usize(bins).unwrap();
    let width = (hi - lo) / nb;
    let edges: Vec<T> = (0..=bins)
        .map(|i| lo + T::from_usize(i).unwrap() * width)
        .collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = ((v - lo) / width).to_f64().unwrap_or(0.0).floor() as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Serializable audit artifact: per-sample log-ratios, the divergence
/// budget they are certified against, and a histogram summary.
///
/// `k_c_bound` is `None` when the audited method carries no finite
/// certificate (an unconstrained retrieval baseline, for instance).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub method: String,
    pub seed: u64,
    pub sample_count: usize,
    pub per_sample_delta_max: Vec<f64>,
    pub delta_kl: Option<BootstrapCi<f64>>,
    pub k_c_bound: Option<f64>,
    pub k_c_closed_form: Option<f64>,
    pub histogram: Histogram<f64>,
}

impl AuditReport {
    pub fn max_delta(&self) -> f64 {
        self.per_sample_delta_max
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Structural invariants: histogram mass equals the sample count and
    /// that count matches the per-sample list.
    pub fn validate(&self) -> Result<()> {
        if self.per_sample_delta_max.len() != self.sample_count {
            return Err(Error::config(
                "per_sample_delta_max",
                "length must equal sample_count",
            ));
        }
        if self.histogram.total() != self.sample_count as u64 {
            return Err(Error::config(
                "histogram",
                "bin counts must sum to sample_count",
            ));
        }
        Ok(())
    }
}

//! Copyright-protected samplers over a safe and a private score model.
//!
//! Three mechanisms, all driven by the generic sweeps in [`crate::sampler`]:
//!
//! - [`cpr_kl_sample`] runs annealed Langevin dynamics on the averaged score
//!   ½(safe + private), whose stationary family is the normalized geometric
//!   mean of the two diffused distributions. The generalized weighting
//!   q_safe^alpha q_private^(1-alpha) is exposed through
//!   [`cpr_kl_sample_with_alpha`].
//! - [`cpr_choose_sample`] runs the ancestral sweep, switching between the
//!   two scores per step according to a [`ChoicePlan`] (an explicit step
//!   set, a fixed alternation, or the adaptive larger-MSE rule) and records
//!   which model drove each step.
//! - [`cp_k_rejection_sample`] is the baseline: resample until the
//!   log-ratio against the safe model falls at or below a budget k.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::GaussianMixture;
use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::{purpose, stream};
use crate::sampler::{ancestral_sweep, langevin_sweep, ModelChoice, SamplerConfig, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreFn;

pub const DEFAULT_SELECTOR_DRAWS: usize = 8;

/// Which divergence a NAF budget is stated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NafDivergence {
    Kl,
    Max,
}

/// An allowed-divergence budget k_c for near-access-freeness claims.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NafBudget<T> {
    pub k_c: T,
    pub divergence: NafDivergence,
}

impl<T: Real> NafBudget<T> {
    pub fn new(k_c: T, divergence: NafDivergence) -> Result<Self> {
        if !(k_c.is_finite() && k_c >= T::zero()) {
            return Err(Error::config("k_c", "budget must be a non-negative real"));
        }
        Ok(Self { k_c, divergence })
    }
}

/// Which reverse steps use the private model in CPR-Choose.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoicePlan {
    /// Private exactly on the listed execution-step indices.
    Explicit(BTreeSet<usize>),
    /// Private on steps with index congruent to phase modulo period.
    Alternate { period: usize, phase: usize },
    /// Per-step adaptive rule: estimate each model's denoiser MSE with the
    /// given number of shared noise draws and pick the larger, ties safe.
    MinMse { draws: usize },
}

impl ChoicePlan {
    pub fn validate(&self, num_transitions: usize) -> Result<()> {
        match self {
            Self::Explicit(set) => {
                if let Some(&bad) = set.iter().find(|&&i| i >= num_transitions) {
                    return Err(Error::config(
                        "plan",
                        format!("step index {bad} outside 0..{num_transitions}"),
                    ));
                }
            }
            Self::Alternate { period, phase } => {
                if *period == 0 {
                    return Err(Error::config("period", "must be at least 1"));
                }
                if phase >= period {
                    return Err(Error::config("phase", "must be smaller than period"));
                }
            }
            Self::MinMse { draws } => {
                if *draws == 0 {
                    return Err(Error::config("draws", "need at least one noise draw"));
                }
            }
        }
        Ok(())
    }

    /// Whether the private model runs at the given execution step; None for
    /// the adaptive rule, which decides from the state.
    pub fn private_at(&self, exec: usize) -> Option<bool> {
        match self {
            Self::Explicit(set) => Some(set.contains(&exec)),
            Self::Alternate { period, phase } => Some(exec % period == *phase),
            Self::MinMse { .. } => None,
        }
    }

    /// The step set J a finished trajectory actually used.
    pub fn materialize(choices: &[ModelChoice]) -> BTreeSet<usize> {
        choices
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == ModelChoice::Private)
            .map(|(i, _)| i)
            .collect()
    }
}

/// CPR-KL with the standard square-root weighting.
pub fn cpr_kl_sample<T, S1, S2>(
    safe: &S1,
    private: &S2,
    config: &SamplerConfig<T>,
    traj_index: u64,
) -> Result<Trajectory<T>>
where
    T: Real,
    S1: ScoreFn<T> + ?Sized,
    S2: ScoreFn<T> + ?Sized,
{
    cpr_kl_sample_with_alpha(safe, private, config, traj_index, T::lit(0.5))
}

/// CPR-KL drift alpha * safe + (1 - alpha) * private, targeting the
/// normalized product q_safe^alpha q_private^(1-alpha) level by level.
pub fn cpr_kl_sample_with_alpha<T, S1, S2>(
    safe: &S1,
    private: &S2,
    config: &SamplerConfig<T>,
    traj_index: u64,
    alpha: T,
) -> Result<Trajectory<T>>
where
    T: Real,
    S1: ScoreFn<T> + ?Sized,
    S2: ScoreFn<T> + ?Sized,
{
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::config("alpha", "geometric weight must lie in [0, 1]"));
    }
    let beta = T::one() - alpha;
    langevin_sweep(config, traj_index, |x, info| {
        let s1 = safe.eval(x, info.grid)?;
        let s2 = private.eval(x, info.grid)?;
        Ok(s1
            .iter()
            .zip(&s2)
            .map(|(&a, &b)| alpha * a + beta * b)
            .collect())
    })
}

/// Outcome of the larger-MSE model selection at one step.
#[derive(Debug, Clone)]
pub struct MseDecision<T> {
    pub choice: ModelChoice,
    pub mse_safe: T,
    pub mse_private: T,
    pub score_safe: Vec<T>,
    pub score_private: Vec<T>,
}

/// Estimate E_eps ||eps - eps_hat||^2 for both models at the current state
/// with shared noise draws, where eps_hat = -sigma_t * score is each
/// model's noise prediction, and pick the model with the larger MSE (the
/// worse fit); exact ties go to safe.
pub fn min_mse_selector<T, S1, S2, R>(
    safe: &S1,
    private: &S2,
    schedule: &NoiseSchedule<T>,
    x: &[T],
    grid: usize,
    draws: usize,
    rng: &mut R,
) -> Result<MseDecision<T>>
where
    T: Real,
    S1: ScoreFn<T> + ?Sized,
    S2: ScoreFn<T> + ?Sized,
    R: Rng + ?Sized,
{
    if draws == 0 {
        return Err(Error::config("draws", "need at least one noise draw"));
    }
    let sigma = schedule.sigma(grid);
    let score_safe = safe.eval(x, grid)?;
    let score_private = private.eval(x, grid)?;
    let d = x.len();
    let mut mse_safe = T::zero();
    let mut mse_private = T::zero();
    for _ in 0..draws {
        for j in 0..d {
            let eps = T::std_normal(rng);
            let ds = eps + sigma * score_safe[j];
            let dp = eps + sigma * score_private[j];
            mse_safe += ds * ds;
            mse_private += dp * dp;
        }
    }
    let norm = T::lit(draws as f64);
    mse_safe /= norm;
    mse_private /= norm;
    let choice = if mse_private > mse_safe {
        ModelChoice::Private
    } else {
        ModelChoice::Safe
    };
    Ok(MseDecision {
        choice,
        mse_safe,
        mse_private,
        score_safe,
        score_private,
    })
}

/// CPR-Choose: ancestral sweep picking safe or private per step according
/// to the plan; the returned trajectory carries the per-step choices.
pub fn cpr_choose_sample<T, S1, S2>(
    safe: &S1,
    private: &S2,
    plan: &ChoicePlan,
    config: &SamplerConfig<T>,
    traj_index: u64,
) -> Result<Trajectory<T>>
where
    T: Real,
    S1: ScoreFn<T> + ?Sized,
    S2: ScoreFn<T> + ?Sized,
{
    plan.validate(config.num_transitions())?;
    let mut choices = Vec::with_capacity(config.num_transitions());
    let mut trajectory = ancestral_sweep(config, traj_index, |x, info| {
        let (choice, score) = match plan.private_at(info.exec) {
            Some(true) => (ModelChoice::Private, private.eval(x, info.grid)?),
            Some(false) => (ModelChoice::Safe, safe.eval(x, info.grid)?),
            None => {
                let ChoicePlan::MinMse { draws } = plan else {
                    unreachable!("only the adaptive rule defers the decision");
                };
                let mut rng = stream(
                    config.seed,
                    &[purpose::SELECTOR, traj_index, info.exec as u64],
                );
                let decision = min_mse_selector(
                    safe,
                    private,
                    &config.schedule,
                    x,
                    info.grid,
                    *draws,
                    &mut rng,
                )?;
                let score = match decision.choice {
                    ModelChoice::Safe => decision.score_safe,
                    ModelChoice::Private => decision.score_private,
                };
                (decision.choice, score)
            }
        };
        choices.push(choice);
        Ok(score)
    })?;
    trajectory.choices = Some(choices);
    Ok(trajectory)
}

#[derive(Debug, Clone)]
pub struct RejectionOutcome<T> {
    pub sample: Vec<T>,
    pub attempts: u64,
}

/// Rejection baseline: draw from the private sampler until the log-ratio
/// log p(x) - log safe(x) is at most k.
pub fn cp_k_rejection_sample<T, D, L>(
    mut draw: D,
    log_ratio: L,
    k: T,
    max_attempts: u64,
) -> Result<RejectionOutcome<T>>
where
    T: Real,
    D: FnMut(u64) -> Result<Vec<T>>,
    L: Fn(&[T]) -> Result<T>,
{
    if max_attempts == 0 {
        return Err(Error::config("max_attempts", "need at least one attempt"));
    }
    if k.is_nan() || k < T::zero() {
        return Err(Error::config("k", "budget must be non-negative"));
    }
    for attempt in 1..=max_attempts {
        let x = draw(attempt)?;
        if log_ratio(&x)? <= k {
            return Ok(RejectionOutcome { sample: x, attempts: attempt });
        }
    }
    Err(Error::RejectionTimeout { attempts: max_attempts })
}

/// Probability that a private-model draw passes the CP-k test, by 1D
/// quadrature of the private density over the acceptance region.
pub fn cp_k_acceptance_probability<T: Real>(
    private: &GaussianMixture<T>,
    safe: &GaussianMixture<T>,
    k: T,
) -> Result<T> {
    if private.dim() != 1 || safe.dim() != 1 {
        return Err(Error::Unsupported(
            "acceptance-rate quadrature is implemented for 1D only".into(),
        ));
    }
    let span = |m: &GaussianMixture<T>, widen: T| {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for c in m.components() {
            let s = c.cov_diag[0].sqrt() * widen;
            lo = lo.min(c.mean[0] - s);
            hi = hi.max(c.mean[0] + s);
        }
        (lo, hi)
    };
    let widen = T::lit(10.0);
    let (lo1, hi1) = span(private, widen);
    let (lo2, hi2) = span(safe, widen);
    let lo = lo1.min(lo2);
    let hi = hi1.max(hi2);
    let n = 40_000usize;
    let h = (hi - lo) / T::lit(n as f64);
    let mut acc = T::zero();
    for i in 0..=n {
        let x = [lo + T::lit(i as f64) * h];
        let lp = private.log_density(&x)?;
        let ls = safe.log_density(&x)?;
        if lp - ls <= k {
            let w = if i == 0 || i == n { T::lit(0.5) } else { T::one() };
            acc += w * lp.exp();
        }
    }
    Ok(acc * h)
}

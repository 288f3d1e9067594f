//! Callable interfaces connecting oracles to samplers and audits.
//!
//! A score function or denoiser is always evaluated at a schedule grid
//! index, never at a free time value: the grid is the single source of truth
//! for gamma_t and sigma_t, and keeping callers on it removes a whole class
//! of clamp bugs.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::Result;
use crate::num::Real;

/// Score field s(x, t_step) of a diffused distribution, evaluated on the
/// schedule grid.
pub trait ScoreFn<T: Real>: Sync {
    fn eval(&self, x: &[T], step: usize) -> Result<Vec<T>>;
}

impl<T: Real, F> ScoreFn<T> for F
where
    F: Fn(&[T], usize) -> Result<Vec<T>> + Sync,
{
    fn eval(&self, x: &[T], step: usize) -> Result<Vec<T>> {
        self(x, step)
    }
}

/// Noise predictor (MMSE denoiser) of a diffused distribution on the grid.
pub trait DenoiserFn<T: Real>: Sync {
    fn eval(&self, x: &[T], step: usize) -> Result<Vec<T>>;
}

/// Denoiser obtained from a score field through the Tweedie identity
/// eps_hat = -sigma_t * score. Exact whenever the score is exact.
pub struct TweedieDenoiser<'a, T: Real> {
    score: &'a dyn ScoreFn<T>,
    sigmas: Vec<T>,
}

impl<'a, T: Real> TweedieDenoiser<'a, T> {
    pub fn new(score: &'a dyn ScoreFn<T>, schedule: &crate::schedule::NoiseSchedule<T>) -> Self {
        let sigmas = (0..schedule.num_steps()).map(|i| schedule.sigma(i)).collect();
        Self { score, sigmas }
    }
}

impl<T: Real> DenoiserFn<T> for TweedieDenoiser<'_, T> {
    fn eval(&self, x: &[T], step: usize) -> Result<Vec<T>> {
        let mut s = self.score.eval(x, step)?;
        let sigma = self.sigmas[step];
        for v in &mut s {
            *v = -sigma * *v;
        }
        Ok(s)
    }
}

/// Wrapper that counts evaluations, used by the cost bench and by tests that
/// pin the per-trajectory evaluation budget.
pub struct CountingScore<'a, T: Real> {
    inner: &'a dyn ScoreFn<T>,
    count: AtomicU64,
}

impl<'a, T: Real> CountingScore<'a, T> {
    pub fn new(inner: &'a dyn ScoreFn<T>) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

impl<T: Real> ScoreFn<T> for CountingScore<'_, T> {
    fn eval(&self, x: &[T], step: usize) -> Result<Vec<T>> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(x, step)
    }
}

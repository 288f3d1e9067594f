//! Reverse-process samplers over a noise schedule.
//!
//! Two drivers are provided. [`ancestral_sweep`] walks the schedule grid
//! from t = 1 down to t = 0 (or t_min), applying one reverse transition per
//! grid step with a caller-supplied score at each step. [`langevin_sweep`]
//! anneals instead: at every grid level it runs a fixed number of
//! unadjusted Langevin steps against a caller-supplied drift score and
//! carries the state to the next level unchanged. Both record the full
//! state trajectory and both key every random draw by (seed, purpose,
//! trajectory index, step), so batches are bit-reproducible regardless of
//! how work is scheduled across threads.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::{purpose, stream};
use crate::schedule::{AncestralKind, NoiseSchedule, StepCoefficients};
use crate::score::ScoreFn;

pub const DEFAULT_LANGEVIN_STEPS: usize = 12;
pub const DEFAULT_LANGEVIN_EPS0: f64 = 0.02;

/// Which of the two models produced a given reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Safe,
    Private,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig<T> {
    pub schedule: Arc<NoiseSchedule<T>>,
    pub kind: AncestralKind,
    /// Inner iterations per level for Langevin annealing.
    pub langevin_steps: usize,
    /// Base Langevin step size; the level step size is eps0 * sigma_t^2.
    pub langevin_eps0: T,
    /// Append the deterministic data-space step from t_min to t = 0. Audits
    /// of per-step noise ratios turn this off so every recorded transition
    /// carries noise.
    pub denoise_to_zero: bool,
    pub seed: u64,
    pub dim: usize,
}

impl<T: Real> SamplerConfig<T> {
    pub fn new(schedule: Arc<NoiseSchedule<T>>, dim: usize, seed: u64) -> Self {
        Self {
            schedule,
            kind: AncestralKind::Stochastic,
            langevin_steps: DEFAULT_LANGEVIN_STEPS,
            langevin_eps0: T::lit(DEFAULT_LANGEVIN_EPS0),
            denoise_to_zero: true,
            seed,
            dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "dimension must be at least 1"));
        }
        if self.langevin_steps == 0 {
            return Err(Error::config("langevin_steps", "need at least one inner step"));
        }
        if !(self.langevin_eps0.is_finite() && self.langevin_eps0 > T::zero()) {
            return Err(Error::config("langevin_eps0", "step size must be positive"));
        }
        Ok(())
    }

    /// Number of reverse transitions an ancestral sweep performs.
    pub fn num_transitions(&self) -> usize {
        let n = self.schedule.num_steps();
        if self.denoise_to_zero {
            n
        } else {
            n - 1
        }
    }

    /// Transition noise scale per execution step, in sweep order. The final
    /// data-space step (when enabled) and all deterministic steps are zero.
    pub fn transition_sigmas(&self) -> Vec<T> {
        let n = self.schedule.num_steps();
        (0..self.num_transitions())
            .map(|k| self.schedule.step_coefficients(n - 1 - k, self.kind).sigma)
            .collect()
    }
}

/// Position of one reverse step: `exec` counts from 0 at t = 1 in execution
/// order, `grid` is the schedule grid index the step evaluates at.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo<T> {
    pub exec: usize,
    pub grid: usize,
    pub t: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory<T> {
    /// (t, state) pairs from t = 1 down to the final time.
    pub states: Vec<(T, Vec<T>)>,
    /// Per-step model choices, present for choice-based samplers.
    pub choices: Option<Vec<ModelChoice>>,
    pub seed: u64,
    pub index: u64,
}

impl<T: Real> Trajectory<T> {
    pub fn final_state(&self) -> &[T] {
        &self.states.last().expect("trajectory has at least one state").1
    }

    pub fn final_t(&self) -> T {
        self.states.last().expect("trajectory has at least one state").0
    }
}

/// One reverse transition: alpha1 * x + alpha2 * score + sigma * noise.
pub fn reverse_update<T: Real>(
    x: &[T],
    score: &[T],
    coeffs: &StepCoefficients<T>,
    noise: Option<&[T]>,
) -> Vec<T> {
    let mut out: Vec<T> = x
        .iter()
        .zip(score)
        .map(|(&xi, &si)| coeffs.alpha1 * xi + coeffs.alpha2 * si)
        .collect();
    if let Some(z) = noise {
        for (o, &zi) in out.iter_mut().zip(z) {
            *o += coeffs.sigma * zi;
        }
    }
    out
}

/// One unadjusted Langevin step: x += (eps / 2) * score + sqrt(eps) * noise.
pub fn ula_step<T: Real>(x: &mut [T], drift_score: &[T], eps: T, noise: &[T]) {
    let half_eps = eps / T::lit(2.0);
    let root_eps = eps.sqrt();
    for j in 0..x.len() {
        x[j] += half_eps * drift_score[j] + root_eps * noise[j];
    }
}

fn check_finite<T: Real>(x: &[T], exec: usize, t: T) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: exec,
            t: t.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

fn draw_init<T: Real>(config: &SamplerConfig<T>, traj_index: u64) -> Vec<T> {
    let mut rng = stream(config.seed, &[purpose::INIT, traj_index]);
    (0..config.dim).map(|_| T::std_normal(&mut rng)).collect()
}

/// Ancestral reverse sweep with a per-step score hook. The hook sees the
/// current state and step position and returns the score to drive that
/// transition; choice-based samplers use it to switch models and record
/// which one ran.
pub fn ancestral_sweep<T, F>(
    config: &SamplerConfig<T>,
    traj_index: u64,
    mut score_at: F,
) -> Result<Trajectory<T>>
where
    T: Real,
    F: FnMut(&[T], StepInfo<T>) -> Result<Vec<T>>,
{
    config.validate()?;
    let n = config.schedule.num_steps();
    let mut x = draw_init(config, traj_index);
    let mut states = Vec::with_capacity(config.num_transitions() + 1);
    states.push((config.schedule.t(n - 1), x.clone()));

    for exec in 0..config.num_transitions() {
        let from = n - 1 - exec;
        let info = StepInfo {
            exec,
            grid: from,
            t: config.schedule.t(from),
        };
        let score = score_at(&x, info)?;
        if score.len() != config.dim {
            return Err(Error::DimensionMismatch {
                context: "score output",
                expected: config.dim,
                actual: score.len(),
            });
        }
        let coeffs = config.schedule.step_coefficients(from, config.kind);
        let noise = if coeffs.sigma > T::zero() {
            let mut rng = stream(config.seed, &[purpose::STEP, traj_index, exec as u64]);
            Some((0..config.dim).map(|_| T::std_normal(&mut rng)).collect::<Vec<_>>())
        } else {
            None
        };
        x = reverse_update(&x, &score, &coeffs, noise.as_deref());
        let t_next = if from == 0 {
            T::zero()
        } else {
            config.schedule.t(from - 1)
        };
        check_finite(&x, exec, t_next)?;
        states.push((t_next, x.clone()));
    }

    Ok(Trajectory {
        states,
        choices: None,
        seed: config.seed,
        index: traj_index,
    })
}

/// Annealed Langevin sweep: at every grid level, `langevin_steps`
/// unadjusted Langevin iterations with step size eps0 * sigma_t^2 against
/// the hook's drift score; the state passes to the next level unchanged.
pub fn langevin_sweep<T, F>(
    config: &SamplerConfig<T>,
    traj_index: u64,
    mut drift_at: F,
) -> Result<Trajectory<T>>
where
    T: Real,
    F: FnMut(&[T], StepInfo<T>) -> Result<Vec<T>>,
{
    config.validate()?;
    let n = config.schedule.num_steps();
    let mut x = draw_init(config, traj_index);
    let mut states = Vec::with_capacity(n + 1);
    states.push((config.schedule.t(n - 1), x.clone()));

    for exec in 0..n {
        let grid = n - 1 - exec;
        let t = config.schedule.t(grid);
        let sigma = config.schedule.sigma(grid);
        let eps = config.langevin_eps0 * sigma * sigma;
        let info = StepInfo { exec, grid, t };
        let mut rng = stream(config.seed, &[purpose::LANGEVIN, traj_index, exec as u64]);
        for _ in 0..config.langevin_steps {
            let drift = drift_at(&x, info)?;
            if drift.len() != config.dim {
                return Err(Error::DimensionMismatch {
                    context: "drift score output",
                    expected: config.dim,
                    actual: drift.len(),
                });
            }
            let noise: Vec<T> = (0..config.dim).map(|_| T::std_normal(&mut rng)).collect();
            ula_step(&mut x, &drift, eps, &noise);
        }
        check_finite(&x, exec, t)?;
        states.push((t, x.clone()));
    }

    Ok(Trajectory {
        states,
        choices: None,
        seed: config.seed,
        index: traj_index,
    })
}

/// Ancestral sweep driven by a single score function.
pub fn run_backward<T, S>(
    config: &SamplerConfig<T>,
    score: &S,
    traj_index: u64,
) -> Result<Trajectory<T>>
where
    T: Real,
    S: ScoreFn<T> + ?Sized,
{
    ancestral_sweep(config, traj_index, |x, info| score.eval(x, info.grid))
}

/// Batch of independent trajectories, parallelised over indices. Output is
/// identical to calling [`run_backward`] for each index in order.
pub fn run_batch<T, S>(
    config: &SamplerConfig<T>,
    score: &S,
    count: u64,
) -> Result<Vec<Trajectory<T>>>
where
    T: Real,
    S: ScoreFn<T> + Sync + ?Sized,
{
    (0..count)
        .into_par_iter()
        .map(|i| run_backward(config, score, i))
        .collect()
}

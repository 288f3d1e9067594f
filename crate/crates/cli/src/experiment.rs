//! Scenario construction and the experiment operations: drawing samples
//! under a configured method, auditing the draws against a divergence
//! budget, and counting score evaluations for cost comparisons.
//!
//! A scenario resolves the config into concrete objects once: the noise
//! schedule, the safe oracle with its conditioning vector, and the private
//! side, which is either a second analytic oracle or a retrieval mixture
//! over a datastore. Sampling is batch-parallel; determinism comes from the
//! core's seeding discipline, not from the execution order.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use cpr_core::audit::{
    choose_trajectory_log_ratio, delta_kl_estimate, delta_max_estimated, delta_max_exact,
    estimate_step_gap_bound, histogram, k_c_bound_from_sigmas, k_c_choose_bound, k_c_hellinger,
    AuditReport,
};
use cpr_core::cpr::{cp_k_rejection_sample, cpr_choose_sample, cpr_kl_sample_with_alpha, ChoicePlan};
use cpr_core::dist::{geometric_mean_gaussian, GaussianMixture, OracleScore, ScoreOracle};
use cpr_core::retrieval::{retrieval_mixture_score_fn, retrieve, DataStore, RetrievalResult};
use cpr_core::rng::{purpose, stream};
use cpr_core::sampler::{run_backward, run_batch, SamplerConfig, Trajectory};
use cpr_core::schedule::NoiseSchedule;
use cpr_core::score::{CountingScore, ScoreFn, TweedieDenoiser};

use crate::config::{ExperimentConfig, Method, RetrievalSpec};
use crate::error::{CliError, CliResult};

pub struct Scenario {
    pub config: ExperimentConfig,
    pub schedule: Arc<NoiseSchedule<f64>>,
    pub sampler: SamplerConfig<f64>,
    pub method: Method,
    pub safe_oracle: ScoreOracle<f64>,
    pub safe_condition: Vec<f64>,
    /// Data-space law the safe model samples.
    pub safe_law: GaussianMixture<f64>,
    pub private: Option<PrivateSide>,
}

pub enum PrivateSide {
    Analytic {
        oracle: ScoreOracle<f64>,
        condition: Vec<f64>,
        law: GaussianMixture<f64>,
    },
    Store {
        spec: RetrievalSpec,
        result: RetrievalResult<f64>,
        /// Exact combined law when the base family has one component:
        /// mixing equal-covariance scores is then a mean shift.
        law: Option<GaussianMixture<f64>>,
    },
}

/// Concrete score functions for one run. `private` is a trait object so the
/// analytic and retrieval cases share every downstream code path.
pub struct Models {
    pub safe: OracleScore<f64>,
    pub private: Option<Box<dyn ScoreFn<f64>>>,
}

impl Scenario {
    pub fn build(config: ExperimentConfig, config_path: &Path) -> CliResult<Self> {
        config.validate(config_path)?;
        let method = config.method.resolve()?;
        let schedule = Arc::new(config.schedule.build()?);
        let mut sampler = SamplerConfig::new(Arc::clone(&schedule), 0, config.seed);
        sampler.kind = config.sampler.ancestral_kind()?;
        sampler.langevin_steps = config.sampler.langevin_steps;
        sampler.langevin_eps0 = config.sampler.langevin_eps0;
        sampler.denoise_to_zero = config.sampler.denoise_to_zero;

        let safe_family = config.safe.family("safe")?;
        let safe_condition = config.safe.resolve_condition(&safe_family, "safe")?;
        let safe_oracle = ScoreOracle::new(safe_family, Arc::clone(&schedule));
        let safe_law = safe_oracle.conditioned(&safe_condition)?;
        sampler.dim = safe_law.dim();

        let private = match &config.private {
            None => None,
            Some(spec) if spec.is_store() => {
                let path = config.store_path(config_path).expect("store-backed private");
                let store: DataStore<f64> = DataStore::open(&path)?;
                let retrieval = config
                    .retrieval
                    .clone()
                    .expect("validation requires a retrieval section");
                let embedding_dim = safe_oracle.family().embedding_dim();
                if store.dim() != embedding_dim {
                    return Err(CliError::config(
                        "safe.condition_matrix",
                        format!(
                            "store embeddings have dimension {} but the safe family conditions on dimension {}",
                            store.dim(),
                            embedding_dim
                        ),
                    ));
                }
                if retrieval.query.len() != store.dim() {
                    return Err(CliError::config(
                        "retrieval.query",
                        format!(
                            "length {} does not match the store dimension {}",
                            retrieval.query.len(),
                            store.dim()
                        ),
                    ));
                }
                let result = retrieve(&store, &retrieval.query, retrieval.m)?;
                let law = combined_retrieval_law(&safe_oracle, &result, &retrieval)?;
                Some(PrivateSide::Store { spec: retrieval, result, law })
            }
            Some(spec) => {
                let mixture_spec = spec.as_mixture_spec()?;
                let family = mixture_spec.family("private")?;
                let condition = mixture_spec.resolve_condition(&family, "private")?;
                let oracle = ScoreOracle::new(family, Arc::clone(&schedule));
                let law = oracle.conditioned(&condition)?;
                if law.dim() != safe_law.dim() {
                    return Err(CliError::config(
                        "private.means",
                        format!(
                            "private dimension {} does not match safe dimension {}",
                            law.dim(),
                            safe_law.dim()
                        ),
                    ));
                }
                Some(PrivateSide::Analytic { oracle, condition, law })
            }
        };

        Ok(Self {
            config,
            schedule,
            sampler,
            method,
            safe_oracle,
            safe_condition,
            safe_law,
            private,
        })
    }

    pub fn models(&self) -> CliResult<Models> {
        let safe = self.safe_oracle.score_fn(&self.safe_condition)?;
        let private: Option<Box<dyn ScoreFn<f64>>> = match &self.private {
            None => None,
            Some(PrivateSide::Analytic { oracle, condition, .. }) => {
                Some(Box::new(oracle.score_fn(condition)?))
            }
            Some(PrivateSide::Store { spec, result, .. }) => Some(Box::new(
                retrieval_mixture_score_fn(&self.safe_oracle, result, spec.w0, spec.w1)?,
            )),
        };
        Ok(Models { safe, private })
    }

    /// Data-space law the private drift tracks, when analytic.
    pub fn private_law(&self) -> Option<&GaussianMixture<f64>> {
        match &self.private {
            None => None,
            Some(PrivateSide::Analytic { law, .. }) => Some(law),
            Some(PrivateSide::Store { law, .. }) => law.as_ref(),
        }
    }
}

/// The law whose score equals the fixed-weight retrieval mixture. It exists
/// in closed form only for a single-component base family, where both
/// conditionings shift the same Gaussian.
fn combined_retrieval_law(
    base: &ScoreOracle<f64>,
    result: &RetrievalResult<f64>,
    retrieval: &RetrievalSpec,
) -> CliResult<Option<GaussianMixture<f64>>> {
    if base.family().base().components().len() != 1 {
        return Ok(None);
    }
    let map = base.family().condition_map();
    let shift_query = map.apply(&result.query)?;
    let shift_items = map.apply(&result.mean_item_embedding)?;
    let combined: Vec<f64> = shift_query
        .iter()
        .zip(&shift_items)
        .map(|(&q, &m)| retrieval.w0 * q + retrieval.w1 * m)
        .collect();
    Ok(Some(base.family().base().shifted(&combined)?))
}

pub struct RunOutput {
    pub trajectories: Vec<Trajectory<f64>>,
    /// Accepted-attempt counts per sample, recorded by the rejection
    /// baseline only.
    pub attempts: Option<Vec<u64>>,
}

/// Draw the configured number of trajectories under the scenario's method.
/// The sampler config is a parameter so audits can retune it.
pub fn run_method(
    scenario: &Scenario,
    sampler: &SamplerConfig<f64>,
    safe: &dyn ScoreFn<f64>,
    private: Option<&dyn ScoreFn<f64>>,
) -> CliResult<RunOutput> {
    let n = scenario.config.samples as u64;
    let missing = || CliError::config("private", "method needs a private model");
    let trajectories = match scenario.method {
        Method::Safe => run_batch(sampler, safe, n)?,
        Method::Rag => run_batch(sampler, private.ok_or_else(missing)?, n)?,
        Method::CprKl { alpha } => {
            let p = private.ok_or_else(missing)?;
            (0..n)
                .into_par_iter()
                .map(|i| cpr_kl_sample_with_alpha(safe, p, sampler, i, alpha))
                .collect::<cpr_core::Result<Vec<_>>>()?
        }
        Method::CprAlt { period, phase } => {
            let p = private.ok_or_else(missing)?;
            let plan = ChoicePlan::Alternate { period, phase };
            (0..n)
                .into_par_iter()
                .map(|i| cpr_choose_sample(safe, p, &plan, sampler, i))
                .collect::<cpr_core::Result<Vec<_>>>()?
        }
        Method::CprMin { draws } => {
            let p = private.ok_or_else(missing)?;
            let plan = ChoicePlan::MinMse { draws };
            (0..n)
                .into_par_iter()
                .map(|i| cpr_choose_sample(safe, p, &plan, sampler, i))
                .collect::<cpr_core::Result<Vec<_>>>()?
        }
        Method::CpK { k, max_attempts } => {
            let p = private.ok_or_else(missing)?;
            let private_law = scenario.private_law().ok_or_else(missing)?;
            let pairs = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut kept: Option<Trajectory<f64>> = None;
                    let outcome = cp_k_rejection_sample(
                        |attempt| {
                            let mut attempt_cfg = sampler.clone();
                            attempt_cfg.seed =
                                stream(scenario.config.seed, &[purpose::REJECTION, i, attempt])
                                    .gen::<u64>();
                            let trajectory = run_backward(&attempt_cfg, p, i)?;
                            let x = trajectory.final_state().to_vec();
                            kept = Some(trajectory);
                            Ok(x)
                        },
                        |x| Ok(private_law.log_density(x)? - scenario.safe_law.log_density(x)?),
                        k,
                        max_attempts,
                    )?;
                    Ok((kept.expect("at least one attempt ran"), outcome.attempts))
                })
                .collect::<cpr_core::Result<Vec<_>>>()?;
            let mut trajectories = Vec::with_capacity(pairs.len());
            let mut attempts = Vec::with_capacity(pairs.len());
            for (trajectory, count) in pairs {
                trajectories.push(trajectory);
                attempts.push(count);
            }
            return Ok(RunOutput { trajectories, attempts: Some(attempts) });
        }
    };
    Ok(RunOutput { trajectories, attempts: None })
}

/// Sample under the configured method and audit the draws: per-sample
/// log-ratios against the safe model, the applicable divergence budget, and
/// a KL estimate when the output law is analytic and the batch is large
/// enough for the bootstrap.
pub fn audit_method(scenario: &Scenario, models: &Models) -> CliResult<(AuditReport, RunOutput)> {
    let mut sampler = scenario.sampler.clone();
    if scenario.method.is_choose() {
        // Per-step noise ratios need every recorded transition stochastic.
        sampler.denoise_to_zero = false;
    }
    let private = models.private.as_deref();
    let run = run_method(scenario, &sampler, &models.safe, private)?;
    let xs: Vec<Vec<f64>> = run
        .trajectories
        .iter()
        .map(|t| t.final_state().to_vec())
        .collect();
    let spec = &scenario.config.audit;
    let seed = scenario.config.seed;
    let safe_law = &scenario.safe_law;

    // Law whose density the per-sample ratios use on the non-safe side;
    // for the rejection baseline that is the proposal, not the truncated
    // output law.
    let ratio_law: Option<GaussianMixture<f64>> = match scenario.method {
        Method::Safe => Some(safe_law.clone()),
        Method::Rag | Method::CpK { .. } => scenario.private_law().cloned(),
        Method::CprKl { alpha } => scenario
            .private_law()
            .and_then(|p| geometric_mean_gaussian(safe_law, p, alpha).ok()),
        Method::CprAlt { .. } | Method::CprMin { .. } => None,
    };

    let per_sample: Vec<f64> = if scenario.method.is_choose() {
        let p = private.expect("choose methods are validated to have a private model");
        run.trajectories
            .iter()
            .map(|t| choose_trajectory_log_ratio(t, &models.safe, p, &sampler).map(|r| r.total))
            .collect::<cpr_core::Result<_>>()?
    } else if let Some(law) = &ratio_law {
        delta_max_exact(law, safe_law, &xs)?
    } else {
        let p = private.expect("safe always has an analytic ratio law");
        let safe_denoiser = scenario.safe_oracle.denoiser_fn(&scenario.safe_condition)?;
        let estimates = match scenario.method {
            Method::CprKl { alpha } => {
                let mixed = move |x: &[f64], step: usize| -> cpr_core::Result<Vec<f64>> {
                    let s = models.safe.eval(x, step)?;
                    let q = p.eval(x, step)?;
                    Ok(s.iter()
                        .zip(&q)
                        .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
                        .collect())
                };
                let denoiser = TweedieDenoiser::new(&mixed, &scenario.schedule);
                delta_max_estimated(&denoiser, &safe_denoiser, &scenario.schedule, &xs, spec.draws, seed)?
            }
            Method::Rag => {
                let denoiser = TweedieDenoiser::new(p, &scenario.schedule);
                delta_max_estimated(&denoiser, &safe_denoiser, &scenario.schedule, &xs, spec.draws, seed)?
            }
            _ => unreachable!("other methods always carry an analytic ratio law"),
        };
        estimates.into_iter().map(|e| e.value).collect()
    };

    let output_law = match scenario.method {
        Method::CpK { .. } | Method::CprAlt { .. } | Method::CprMin { .. } => None,
        _ => ratio_law.as_ref(),
    };
    let delta_kl = match output_law {
        Some(law) if xs.len() >= 1000 => Some(delta_kl_estimate(
            &xs,
            law,
            safe_law,
            spec.kl_replicates,
            spec.confidence,
            seed,
        )?),
        _ => None,
    };

    let k_c_closed_form = match scenario.private_law() {
        Some(p) => match k_c_hellinger(safe_law, p) {
            Ok(v) => Some(v),
            Err(cpr_core::Error::Unsupported(_)) => None,
            Err(e) => return Err(e.into()),
        },
        None => None,
    };

    let k_c_bound = match scenario.method {
        Method::Safe => Some(0.0),
        // The retrieval baseline is the uncontrolled comparison point.
        Method::Rag => None,
        // The Hellinger budget certifies the balanced product only.
        Method::CprKl { alpha } if (alpha - 0.5).abs() <= 1e-12 => k_c_closed_form,
        Method::CprKl { .. } => None,
        Method::CprAlt { period, phase } => {
            let p = private.expect("validated");
            let b = estimate_step_gap_bound(&run.trajectories, &models.safe, p, &sampler)?;
            let plan = ChoicePlan::Alternate { period, phase };
            Some(k_c_choose_bound(&plan, &sampler, b)?)
        }
        Method::CprMin { .. } => {
            let p = private.expect("validated");
            let b = estimate_step_gap_bound(&run.trajectories, &models.safe, p, &sampler)?;
            let sigmas = sampler.transition_sigmas();
            let mut bound = 0.0f64;
            for trajectory in &run.trajectories {
                let choices = trajectory.choices.as_ref().expect("choose samplers record choices");
                let j = ChoicePlan::materialize(choices);
                bound = bound.max(k_c_bound_from_sigmas(&j, &sigmas, b)?);
            }
            Some(bound)
        }
        Method::CpK { k, .. } => Some(k),
    };

    let hist = histogram(&per_sample, spec.bins)?;
    let report = AuditReport {
        method: scenario.method.key().into(),
        seed,
        sample_count: xs.len(),
        per_sample_delta_max: per_sample,
        delta_kl,
        k_c_bound,
        k_c_closed_form,
        histogram: hist,
    };
    report.validate()?;
    Ok((report, run))
}

pub struct BenchRow {
    pub config: String,
    pub method: &'static str,
    pub samples: usize,
    pub safe_evals: u64,
    pub private_evals: u64,
    pub mean_attempts: Option<f64>,
    pub max_attempts: Option<u64>,
    /// Printed, never written: keeps the CSV artifact reproducible.
    pub wall_secs: f64,
}

/// Run the configured method once with counting wrappers around both score
/// functions and report the evaluation budget.
pub fn bench_scenario(label: &str, scenario: &Scenario, models: &Models) -> CliResult<BenchRow> {
    let safe = CountingScore::new(&models.safe);
    let private = models.private.as_deref().map(CountingScore::new);
    let start = Instant::now();
    let run = run_method(
        scenario,
        &scenario.sampler,
        &safe,
        private.as_ref().map(|c| c as &dyn ScoreFn<f64>),
    )?;
    let wall_secs = start.elapsed().as_secs_f64();
    let attempts = run.attempts.as_ref();
    Ok(BenchRow {
        config: label.into(),
        method: scenario.method.key(),
        samples: scenario.config.samples,
        safe_evals: safe.count(),
        private_evals: private.as_ref().map_or(0, CountingScore::count),
        mean_attempts: attempts.map(|a| a.iter().sum::<u64>() as f64 / a.len() as f64),
        max_attempts: attempts.and_then(|a| a.iter().copied().max()),
        wall_secs,
    })
}

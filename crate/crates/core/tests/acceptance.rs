//! Release gate: one test per acceptance criterion. Each prints a single
//! pass/fail line (run with --nocapture to see them all) and panics on
//! failure, so `cargo test` fails if any criterion does. Tolerances are
//! pinned as constants next to the checks that use them.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use cpr_core::audit::{
    choose_trajectory_log_ratio, delta_kl_estimate, delta_max_exact, estimate_step_gap_bound,
    k_c_bound_from_sigmas, k_c_choose_bound, k_c_hellinger, mmse_log_prob_diff,
};
use cpr_core::cpr::{
    cp_k_acceptance_probability, cp_k_rejection_sample, cpr_choose_sample, cpr_kl_sample,
    ChoicePlan,
};
use cpr_core::dist::{
    mixture_score, AffineMap, Component, ConditionalFamily, GaussianMixture, ScoreOracle,
    WeightMode,
};
use cpr_core::retrieval::{
    record_score, retrieval_mixture_score_fn, retrieve, unlearn, DataStore, EmbeddingRecord,
};
use cpr_core::rng::{purpose, stream};
use cpr_core::sampler::{run_backward, SamplerConfig};
use cpr_core::schedule::NoiseSchedule;
use cpr_core::score::CountingScore;
use cpr_core::stats::{bootstrap_mean_ci, energy_two_sample_test_1d, percentile};

const SCORE_TRIPLES_PER_DIM: usize = 70;
const SCORE_FD_STEP: f64 = 1e-5;
const SCORE_REL_TOL: f64 = 1e-4;
const SCORE_TIME_BUDGET_SECS: f64 = 10.0;
const TWEEDIE_EVALS: usize = 1000;
const TWEEDIE_TOL: f64 = 1e-10;
const CPR_KL_SAMPLES: u64 = 10_000;
const ENERGY_SIGNIFICANCE: f64 = 0.01;
const ENERGY_PERMUTATIONS: usize = 199;
const MOMENT_TOL: f64 = 0.05;
const CPR_KL_TIME_BUDGET_SECS: f64 = 120.0;
const KL_AUDIT_SAMPLES: u64 = 4000;
const BOUNDARY_SEEDS: usize = 20;
const NAF_MAX_TRAJECTORIES: u64 = 1000;
const NAF_MAX_SLACK: f64 = 1e-6;
const DELTA_MAX_SAMPLES: u64 = 2000;
const DIFF_DRAWS: usize = 256;
const DIFF_TOL_NATS: f64 = 0.05;
const DIFF_HALVING_WINDOW: (f64, f64) = (1.5, 2.5);
const DIFF_REPLICATE_SEEDS: u64 = 100;
const CPK_RUNS: u64 = 2000;
const CPK_MAX_ATTEMPTS: u64 = 100_000;
const RETRIEVAL_STORES: usize = 1000;
const UNLEARN_QUERIES: usize = 10_000;
const REMOVAL_SCALING_MAX_RATIO: f64 = 50.0;

type CheckResult = std::result::Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn criterion(n: u32, name: &str, body: impl FnOnce() -> CheckResult) {
    match body() {
        Ok(()) => println!("criterion {n:2}: PASS  {name}"),
        Err(msg) => {
            println!("criterion {n:2}: FAIL  {name}: {msg}");
            panic!("criterion {n} failed: {msg}");
        }
    }
}

fn lab() -> Arc<NoiseSchedule<f64>> {
    Arc::new(NoiseSchedule::default_lab())
}

fn unit_oracle(mean: f64, schedule: &Arc<NoiseSchedule<f64>>) -> ScoreOracle<f64> {
    ScoreOracle::new(
        ConditionalFamily::unconditional(
            GaussianMixture::gaussian(vec![mean], vec![1.0]).expect("valid gaussian"),
        ),
        Arc::clone(schedule),
    )
}

fn random_mixture(rng: &mut impl Rng, dim: usize, comps: usize) -> GaussianMixture<f64> {
    let mut weights: Vec<f64> = (0..comps).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let means: Vec<Vec<f64>> = (0..comps)
        .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let covs: Vec<Vec<f64>> = (0..comps)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.3..2.0)).collect())
        .collect();
    GaussianMixture::from_parts(&weights, &means, &covs).expect("valid mixture")
}

fn random_map(rng: &mut impl Rng, dim: usize, k: usize) -> AffineMap<f64> {
    let matrix: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let offset: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    AffineMap::new(matrix, offset).expect("valid map")
}

#[test]
fn criterion_01_mixture_score_matches_finite_differences() {
    criterion(1, "exact mixture score equals finite-difference gradients", || {
        let start = Instant::now();
        let schedule = lab();
        let weights = [0.3, 0.7];
        for (di, dim) in [1usize, 2, 4].into_iter().enumerate() {
            let mut rng = stream(4100 + di as u64, &[purpose::INIT]);
            let fam_a = ConditionalFamily::new(
                random_mixture(&mut rng, dim, 2),
                random_map(&mut rng, dim, 2),
            )
            .map_err(|e| e.to_string())?;
            let fam_b = ConditionalFamily::new(
                random_mixture(&mut rng, dim, 1),
                random_map(&mut rng, dim, 2),
            )
            .map_err(|e| e.to_string())?;
            let a = ScoreOracle::new(fam_a, Arc::clone(&schedule));
            let b = ScoreOracle::new(fam_b, Arc::clone(&schedule));
            for _ in 0..SCORE_TRIPLES_PER_DIM {
                let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let c: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let step = rng.gen_range(0..schedule.num_steps());
                let score = mixture_score(&[&a, &b], &weights, WeightMode::Exact, &x, step, &c)
                    .map_err(|e| e.to_string())?;

                // Independent reference: flatten both diffused conditional
                // laws into one explicit mixture and differentiate its
                // log-density numerically.
                let mut parts: Vec<Component<f64>> = Vec::new();
                for (oracle, w) in [(&a, weights[0]), (&b, weights[1])] {
                    let diffused = oracle.diffused(step, &c).map_err(|e| e.to_string())?;
                    for comp in diffused.components() {
                        parts.push(Component {
                            weight: w * comp.weight,
                            mean: comp.mean.clone(),
                            cov_diag: comp.cov_diag.clone(),
                        });
                    }
                }
                let explicit = GaussianMixture::new(parts).map_err(|e| e.to_string())?;
                for j in 0..dim {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += SCORE_FD_STEP;
                    xm[j] -= SCORE_FD_STEP;
                    let fd = (explicit.log_density(&xp).map_err(|e| e.to_string())?
                        - explicit.log_density(&xm).map_err(|e| e.to_string())?)
                        / (2.0 * SCORE_FD_STEP);
                    let tol = SCORE_REL_TOL * score[j].abs().max(1.0);
                    ensure!(
                        (score[j] - fd).abs() <= tol,
                        "dim {dim} axis {j}: score {} vs finite difference {}",
                        score[j],
                        fd
                    );
                }
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        ensure!(
            elapsed < SCORE_TIME_BUDGET_SECS,
            "took {elapsed:.2}s, budget {SCORE_TIME_BUDGET_SECS}s"
        );
        Ok(())
    });
}

#[test]
fn criterion_02_tweedie_identity() {
    criterion(2, "denoiser equals -sigma * score across random evaluations", || {
        let schedule = lab();
        let mut rng = stream(4200, &[purpose::INIT]);
        let mut done = 0usize;
        while done < TWEEDIE_EVALS {
            let dim = rng.gen_range(1..=3);
            let comps = rng.gen_range(1..=3);
            let oracle = ScoreOracle::new(
                ConditionalFamily::unconditional(random_mixture(&mut rng, dim, comps)),
                Arc::clone(&schedule),
            );
            let c = oracle.family().null_condition();
            for _ in 0..20 {
                let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let step = rng.gen_range(0..schedule.num_steps());
                let eps_hat = oracle.mmse_denoiser(&x, step, &c).map_err(|e| e.to_string())?;
                let score = oracle.score(&x, step, &c).map_err(|e| e.to_string())?;
                let sigma = schedule.sigma(step);
                for j in 0..dim {
                    let expect = -sigma * score[j];
                    let tol = TWEEDIE_TOL * eps_hat[j].abs().max(1.0);
                    ensure!(
                        (eps_hat[j] - expect).abs() <= tol,
                        "step {step} axis {j}: denoiser {} vs -sigma*score {}",
                        eps_hat[j],
                        expect
                    );
                }
                done += 1;
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_03_cpr_kl_hits_the_product_target() {
    criterion(3, "CPR-KL samples match the normalized product of the two models", || {
        let start = Instant::now();
        let schedule = lab();
        let safe_oracle = unit_oracle(-1.0, &schedule);
        let private_oracle = unit_oracle(1.0, &schedule);
        let safe = safe_oracle.score_fn(&[0.0]).map_err(|e| e.to_string())?;
        let private = private_oracle.score_fn(&[0.0]).map_err(|e| e.to_string())?;
        let cfg = SamplerConfig::new(Arc::clone(&schedule), 1, 430);
        let samples: Vec<f64> = (0..CPR_KL_SAMPLES)
            .into_par_iter()
            .map(|i| cpr_kl_sample(&safe, &private, &cfg, i).map(|t| t.final_state()[0]))
            .collect::<cpr_core::Result<_>>()
            .map_err(|e| e.to_string())?;
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        ensure!(mean.abs() <= MOMENT_TOL, "sample mean {mean}");
        ensure!((var - 1.0).abs() <= MOMENT_TOL, "sample variance {var}");

        // The normalized product of N(-1,1) and N(+1,1) with weight 1/2 is
        // the standard normal.
        let target = GaussianMixture::gaussian(vec![0.0], vec![1.0]).expect("valid gaussian");
        let mut rng = stream(431, &[purpose::MIXTURE_DRAW]);
        let reference: Vec<f64> = (0..CPR_KL_SAMPLES).map(|_| target.sample(&mut rng)[0]).collect();
        let test = energy_two_sample_test_1d(&samples, &reference, ENERGY_PERMUTATIONS, 432)
            .map_err(|e| e.to_string())?;
        ensure!(
            test.passes_at(ENERGY_SIGNIFICANCE),
            "energy test rejected equality: p = {}",
            test.p_value
        );
        let elapsed = start.elapsed().as_secs_f64();
        ensure!(
            elapsed < CPR_KL_TIME_BUDGET_SECS,
            "took {elapsed:.1}s, budget {CPR_KL_TIME_BUDGET_SECS}s"
        );
        Ok(())
    });
}

#[test]
fn criterion_04_kl_certificate() {
    criterion(4, "KL to the safe model stays inside the Hellinger budget", || {
        let schedule = lab();
        let safe_mix = GaussianMixture::gaussian(vec![-1.0], vec![1.0]).expect("valid gaussian");
        let private_mix = GaussianMixture::gaussian(vec![1.0], vec![1.0]).expect("valid gaussian");
        let k_c: f64 = k_c_hellinger(&safe_mix, &private_mix).map_err(|e| e.to_string())?;
        ensure!((k_c - 1.0).abs() <= 1e-12, "closed-form budget {k_c}");

        let safe_oracle = unit_oracle(-1.0, &schedule);
        let private_oracle = unit_oracle(1.0, &schedule);
        let safe = safe_oracle.score_fn(&[0.0]).map_err(|e| e.to_string())?;
        let private = private_oracle.score_fn(&[0.0]).map_err(|e| e.to_string())?;
        let cfg = SamplerConfig::new(Arc::clone(&schedule), 1, 440);
        let samples: Vec<Vec<f64>> = (0..KL_AUDIT_SAMPLES)
            .into_par_iter()
            .map(|i| cpr_kl_sample(&safe, &private, &cfg, i).map(|t| t.final_state().to_vec()))
            .collect::<cpr_core::Result<_>>()
            .map_err(|e| e.to_string())?;
        // The certified output law of the square-root weighting is the
        // normalized product, N(0,1) for this pair; its KL to N(-1,1) is
        // 0.5 in closed form.
        let output = GaussianMixture::gaussian(vec![0.0], vec![1.0]).expect("valid gaussian");
        let ci = delta_kl_estimate(&samples, &output, &safe_mix, 1000, 0.95, 441)
            .map_err(|e| e.to_string())?;
        ensure!(ci.hi <= k_c, "KL upper bound {} exceeds budget {k_c}", ci.hi);
        ensure!(
            (ci.mean - 0.5).abs() <= MOMENT_TOL,
            "KL estimate {} far from the closed form 0.5",
            ci.mean
        );
        Ok(())
    });
}

#[test]
fn criterion_05_choose_boundary_identities() {
    criterion(5, "empty and full step sets reproduce the pure samplers bitwise", || {
        let schedule = lab();
        let safe_oracle = unit_oracle(-1.0, &schedule);
        let private_oracle = unit_oracle(1.0, &schedule);
        let safe = safe_oracle.score_fn(&[0.0]).map_err(|e| e.to_string())?;
        let private = private_oracle.score_fn(&[0.0]).map_err(|e| e.to_string())?;
        let mut seed_rng = stream(450, &[purpose::INIT]);
        for _ in 0..BOUNDARY_SEEDS {
            let seed: u64 = seed_rng.gen();
            let cfg = SamplerConfig::new(Arc::clone(&schedule), 1, seed);
            let empty = cpr_choose_sample(
                &safe,
                &private,
                &ChoicePlan::Explicit(BTreeSet::new()),
                &cfg,
                3,
            )
            .map_err(|e| e.to_string())?;
            let pure_safe = run_backward(&cfg, &safe, 3).map_err(|e| e.to_string())?;
            ensure!(empty.states == pure_safe.states, "seed {seed}: empty J diverged");

            let all: BTreeSet<usize> = (0..cfg.num_transitions()).collect();
            let full = cpr_choose_sample(&safe, &private, &ChoicePlan::Explicit(all), &cfg, 3)
                .map_err(|e| e.to_string())?;
            let pure_private = run_backward(&cfg, &private, 3).map_err(|e| e.to_string())?;
            ensure!(full.states == pure_private.states, "seed {seed}: full J diverged");
        }
        Ok(())
    });
}

#[test]
fn criterion_06_max_divergence_certificate() {
    criterion(6, "per-trajectory log-ratios respect the discrete budget", || {
        let schedule = lab();
        let safe_oracle = unit_oracle(-1.0, &schedule);
        let private_oracle = unit_oracle(1.0, &schedule);
        let safe = safe_oracle.score_fn(&[0.0]).map_err(|e| e.to_string())?;
        let private = private_oracle.score_fn(&[0.0]).map_err(|e| e.to_string())?;
        // Audits need noise at every recorded transition, so the final
        // deterministic data-space step is disabled.
        let mut cfg = SamplerConfig::new(Arc::clone(&schedule), 1, 460);
        cfg.denoise_to_zero = false;
        let sigmas = cfg.transition_sigmas();
        let plans = [
            ChoicePlan::Alternate { period: 2, phase: 0 },
            ChoicePlan::MinMse { draws: 8 },
        ];
        for plan in &plans {
            let trajs: Vec<_> = (0..NAF_MAX_TRAJECTORIES)
                .into_par_iter()
                .map(|i| cpr_choose_sample(&safe, &private, plan, &cfg, i))
                .collect::<cpr_core::Result<_>>()
                .map_err(|e| e.to_string())?;
            let b = estimate_step_gap_bound(&trajs, &safe, &private, &cfg)
                .map_err(|e| e.to_string())?;
            for traj in &trajs {
                let ratio = choose_trajectory_log_ratio(traj, &safe, &private, &cfg)
                    .map_err(|e| e.to_string())?;
                let choices = traj.choices.as_deref().expect("choice sampler records choices");
                let k_c = match plan {
                    ChoicePlan::MinMse { .. } => {
                        let j = ChoicePlan::materialize(choices);
                        k_c_bound_from_sigmas(&j, &sigmas, b).map_err(|e| e.to_string())?
                    }
                    _ => k_c_choose_bound(plan, &cfg, b).map_err(|e| e.to_string())?,
                };
                ensure!(
                    ratio.total <= k_c + NAF_MAX_SLACK,
                    "plan {plan:?} trajectory {}: log-ratio {} exceeds budget {k_c}",
                    traj.index,
                    ratio.total
                );
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_07_log_ratio_quantile_grows_with_retrieval_weight() {
    criterion(7, "95th percentile of the log-ratio is monotone in the retrieval weight", || {
        let schedule = lab();
        let family = ConditionalFamily::new(
            GaussianMixture::gaussian(vec![0.0], vec![1.0]).expect("valid gaussian"),
            AffineMap::identity(1),
        )
        .map_err(|e| e.to_string())?;
        let oracle = ScoreOracle::new(family, Arc::clone(&schedule));

        let mut store: DataStore<f64> = DataStore::in_memory(1);
        store
            .insert(EmbeddingRecord::new("protected-item", vec![2.0], vec![2.0]))
            .map_err(|e| e.to_string())?;
        let c_test = [0.0];
        let result = retrieve(&store, &c_test, 1).map_err(|e| e.to_string())?;
        let safe_law = oracle.family().conditioned(&c_test).map_err(|e| e.to_string())?;

        let mut p95s = Vec::new();
        for (wi, w1) in [0.0, 0.25, 0.5, 0.75, 1.0].into_iter().enumerate() {
            let score = retrieval_mixture_score_fn(&oracle, &result, 1.0 - w1, w1)
                .map_err(|e| e.to_string())?;
            let cfg = SamplerConfig::new(Arc::clone(&schedule), 1, 470 + wi as u64);
            let samples: Vec<Vec<f64>> = (0..DELTA_MAX_SAMPLES)
                .into_par_iter()
                .map(|i| run_backward(&cfg, &score, i).map(|t| t.final_state().to_vec()))
                .collect::<cpr_core::Result<_>>()
                .map_err(|e| e.to_string())?;
            // With equal covariances, the fixed-weight score mixture is the
            // score of the family conditioned on the averaged embedding, so
            // the sampled law has an exact data density to audit against.
            let w_law = oracle
                .family()
                .conditioned(&[2.0 * w1])
                .map_err(|e| e.to_string())?;
            let mut deltas =
                delta_max_exact(&w_law, &safe_law, &samples).map_err(|e| e.to_string())?;
            deltas.sort_by(|a, b| a.partial_cmp(b).expect("finite log-ratio"));
            p95s.push(percentile(&deltas, 0.95));
        }
        ensure!(
            p95s[0].abs() < 1e-12,
            "zero retrieval weight must give a zero log-ratio, got {}",
            p95s[0]
        );
        for w in p95s.windows(2) {
            ensure!(w[1] >= w[0], "95th percentile decreased: {p95s:?}");
        }
        Ok(())
    });
}

#[test]
fn criterion_08_log_prob_difference_accuracy_and_scaling() {
    criterion(8, "log-prob differences are accurate and improve with draws", || {
        let schedule = lab();
        let (x, y) = (0.9, -0.4);

        // Gaussian case against the exact difference of data log-densities.
        let gauss = unit_oracle(0.0, &schedule);
        let den = gauss.denoiser_fn(&[0.0]).map_err(|e| e.to_string())?;
        let est = mmse_log_prob_diff(&den, &[x], &den, &[y], &schedule, DIFF_DRAWS, 480)
            .map_err(|e| e.to_string())?;
        let exact = -0.5 * x * x + 0.5 * y * y;
        ensure!(
            (est.value - exact).abs() <= DIFF_TOL_NATS,
            "gaussian difference off by {} nats",
            est.value - exact
        );

        // Two-component mixture case.
        let mix = GaussianMixture::from_parts(
            &[0.45, 0.55],
            &[vec![-1.1], vec![0.9]],
            &[vec![0.7], vec![1.3]],
        )
        .expect("valid mixture");
        let model = ScoreOracle::new(
            ConditionalFamily::unconditional(mix.clone()),
            Arc::clone(&schedule),
        );
        let dmix = model.denoiser_fn(&[0.0]).map_err(|e| e.to_string())?;
        let est_mix = mmse_log_prob_diff(&dmix, &[x], &dmix, &[y], &schedule, DIFF_DRAWS, 480)
            .map_err(|e| e.to_string())?;
        let exact_mix = mix.log_density(&[x]).map_err(|e| e.to_string())?
            - mix.log_density(&[y]).map_err(|e| e.to_string())?;
        ensure!(
            (est_mix.value - exact_mix).abs() <= DIFF_TOL_NATS,
            "mixture difference off by {} nats",
            est_mix.value - exact_mix
        );

        // Monte-Carlo error must halve when draws quadruple. The replicate
        // spread across seeds isolates that error; the mixture case is used
        // because its noise does not cancel under common random numbers.
        let spread = |draws: usize| -> Result<f64, String> {
            let values: Vec<f64> = (0..DIFF_REPLICATE_SEEDS)
                .into_par_iter()
                .map(|s| {
                    mmse_log_prob_diff(&dmix, &[x], &dmix, &[y], &schedule, draws, 9000 + s)
                        .map(|e| e.value)
                })
                .collect::<cpr_core::Result<_>>()
                .map_err(|e| e.to_string())?;
            let m = values.iter().sum::<f64>() / values.len() as f64;
            Ok((values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                / (values.len() - 1) as f64)
                .sqrt())
        };
        let sd_small = spread(DIFF_DRAWS / 4)?;
        let sd_large = spread(DIFF_DRAWS)?;
        ensure!(sd_large > 0.0, "replicate spread vanished");
        let ratio = sd_small / sd_large;
        ensure!(
            (DIFF_HALVING_WINDOW.0..=DIFF_HALVING_WINDOW.1).contains(&ratio),
            "error ratio {ratio} outside {DIFF_HALVING_WINDOW:?} when draws quadruple"
        );
        Ok(())
    });
}

#[test]
fn criterion_09_cost_accounting() {
    criterion(9, "score-evaluation counts are flat and CP-k attempts match theory", || {
        let schedule = lab();
        let safe_oracle = unit_oracle(-1.0, &schedule);
        let private_oracle = unit_oracle(1.0, &schedule);
        let safe = safe_oracle.score_fn(&[0.0]).map_err(|e| e.to_string())?;
        let private = private_oracle.score_fn(&[0.0]).map_err(|e| e.to_string())?;
        let cfg = SamplerConfig::new(Arc::clone(&schedule), 1, 490);
        let t = cfg.num_transitions() as u64;
        let alt = ChoicePlan::Alternate { period: 2, phase: 0 };
        let alt_private: u64 = (0..t as usize)
            .filter(|&e| alt.private_at(e) == Some(true))
            .count() as u64;

        let count_kl = |i: u64| -> cpr_core::Result<(u64, u64)> {
            let cs = CountingScore::new(&safe);
            let cp = CountingScore::new(&private);
            cpr_kl_sample(&cs, &cp, &cfg, i)?;
            Ok((cs.count(), cp.count()))
        };
        let count_alt = |i: u64| -> cpr_core::Result<(u64, u64)> {
            let cs = CountingScore::new(&safe);
            let cp = CountingScore::new(&private);
            cpr_choose_sample(&cs, &cp, &alt, &cfg, i)?;
            Ok((cs.count(), cp.count()))
        };
        let count_min = |i: u64| -> cpr_core::Result<(u64, u64)> {
            let cs = CountingScore::new(&safe);
            let cp = CountingScore::new(&private);
            cpr_choose_sample(&cs, &cp, &ChoicePlan::MinMse { draws: 8 }, &cfg, i)?;
            Ok((cs.count(), cp.count()))
        };
        // Every level runs langevin_steps inner iterations, each evaluating
        // both models once; the choice samplers evaluate exactly one model
        // per transition except CPR-Min, which scores both to decide.
        let expect_kl = (schedule.num_steps() * cfg.langevin_steps) as u64;
        ensure!(expect_kl == 768, "unexpected default budget {expect_kl}");
        let checks: [(&str, &dyn Fn(u64) -> cpr_core::Result<(u64, u64)>, (u64, u64)); 3] = [
            ("cpr-kl", &count_kl, (expect_kl, expect_kl)),
            ("cpr-alt", &count_alt, (t - alt_private, alt_private)),
            ("cpr-min", &count_min, (t, t)),
        ];
        for (name, counter, expect) in checks {
            for i in 0..5u64 {
                let got = counter(i).map_err(|e| e.to_string())?;
                ensure!(
                    got == expect,
                    "{name} trajectory {i}: (safe, private) evals {got:?}, expected {expect:?}"
                );
            }
        }

        // CP-k: attempts are geometric, so the mean must match the
        // reciprocal of the quadrature acceptance probability.
        let private_mix = GaussianMixture::gaussian(vec![1.0], vec![1.0]).expect("valid gaussian");
        let safe_mix = GaussianMixture::gaussian(vec![0.0], vec![1.0]).expect("valid gaussian");
        for (ki, k) in [0.1, 0.5, 2.0].into_iter().enumerate() {
            let p_accept = cp_k_acceptance_probability(&private_mix, &safe_mix, k)
                .map_err(|e| e.to_string())?;
            let mut attempts = Vec::with_capacity(CPK_RUNS as usize);
            for run in 0..CPK_RUNS {
                let out = cp_k_rejection_sample(
                    |attempt| {
                        let mut rng =
                            stream(600 + ki as u64, &[purpose::REJECTION, run, attempt]);
                        Ok(private_mix.sample(&mut rng))
                    },
                    |x| Ok(private_mix.log_density(x)? - safe_mix.log_density(x)?),
                    k,
                    CPK_MAX_ATTEMPTS,
                )
                .map_err(|e| e.to_string())?;
                attempts.push(out.attempts as f64);
            }
            let ci = bootstrap_mean_ci(&attempts, 1000, 0.95, 499).map_err(|e| e.to_string())?;
            let expect = 1.0 / p_accept;
            ensure!(
                ci.lo <= expect && expect <= ci.hi,
                "k = {k}: mean attempts CI [{}, {}] misses 1/p = {expect}",
                ci.lo,
                ci.hi
            );
        }
        Ok(())
    });
}

#[test]
fn criterion_10_retrieval_and_unlearning() {
    criterion(10, "retrieval is exact, unlearning is total, removal is O(1)", || {
        // Exact top-m against brute force on random stores.
        let mut rng = stream(4300, &[purpose::INIT]);
        for case in 0..RETRIEVAL_STORES {
            let dim = rng.gen_range(1..=4);
            let size = rng.gen_range(1..=40);
            let m = rng.gen_range(1..=5);
            let mut store: DataStore<f64> = DataStore::in_memory(dim);
            for i in 0..size {
                let caption: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let item: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                store
                    .insert(EmbeddingRecord::new(format!("r{i}"), caption, item))
                    .map_err(|e| e.to_string())?;
            }
            let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = retrieve(&store, &query, m).map_err(|e| e.to_string())?;
            let mut expect: Vec<(f64, String)> = store
                .records()
                .iter()
                .map(|r| (record_score(r, &query), r.id.clone()))
                .collect();
            expect.sort_by(|a, b| a.partial_cmp(b).expect("finite retrieval score"));
            expect.truncate(m.min(size));
            let got_ids: Vec<&str> = got.records.iter().map(|r| r.id.as_str()).collect();
            let expect_ids: Vec<&str> = expect.iter().map(|(_, id)| id.as_str()).collect();
            ensure!(
                got_ids == expect_ids,
                "case {case}: retrieval {got_ids:?} differs from brute force {expect_ids:?}"
            );
        }

        // Unlearning: the removed id never appears again, even though the
        // planted record would dominate every query near the center.
        let dim = 2;
        let mut store: DataStore<f64> = DataStore::in_memory(dim);
        let mut rng = stream(4301, &[purpose::INIT]);
        for i in 0..1000 {
            let caption: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let item: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store
                .insert(EmbeddingRecord::new(format!("r{i}"), caption, item))
                .map_err(|e| e.to_string())?;
        }
        store
            .insert(EmbeddingRecord::new("protected", vec![0.0; dim], vec![0.0; dim]))
            .map_err(|e| e.to_string())?;
        unlearn(&mut store, "protected").map_err(|e| e.to_string())?;
        for _ in 0..UNLEARN_QUERIES {
            let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let m = rng.gen_range(1..=5);
            let got = retrieve(&store, &query, m).map_err(|e| e.to_string())?;
            ensure!(
                got.records.iter().all(|r| r.id != "protected"),
                "unlearned id resurfaced"
            );
        }

        // Removal cost must not scale with the store size.
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut per_size = Vec::new();
        for &size in &[100usize, 1000, 10_000, 100_000] {
            let path = tmp.path().join(format!("store-{size}.jsonl"));
            let mut store: DataStore<f64> =
                DataStore::create(&path, 2).map_err(|e| e.to_string())?;
            for i in 0..size {
                let v = i as f64 / size as f64;
                store
                    .insert(EmbeddingRecord::new(format!("r{i}"), vec![v, -v], vec![-v, v]))
                    .map_err(|e| e.to_string())?;
            }
            let victims: Vec<String> = (0..32).map(|j| format!("r{}", j * (size / 32))).collect();
            let start = Instant::now();
            for id in &victims {
                store.remove(id).map_err(|e| e.to_string())?;
            }
            per_size.push((size, start.elapsed().as_secs_f64() / victims.len() as f64));
        }
        let times: Vec<f64> = per_size.iter().map(|(_, t)| *t).collect();
        let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = times.iter().cloned().fold(0.0f64, f64::max);
        ensure!(
            max <= min * REMOVAL_SCALING_MAX_RATIO,
            "removal time scales with store size: {per_size:?}"
        );
        Ok(())
    });
}

//! Analytic Gaussian-mixture distributions and their diffusion oracles.
//!
//! Everything a diffusion model would learn is available here in closed
//! form. For a mixture sum_i w_i N(mu_i, Sigma_i) with diagonal covariances,
//! diffusing along a variance-preserving schedule keeps the family closed:
//! at signal scale gamma and noise scale sigma the marginal is
//! sum_i w_i N(gamma mu_i, gamma^2 Sigma_i + sigma^2 I). Log-densities,
//! scores and MMSE denoisers are exact, so sampler output and audit numbers
//! can be checked against ground truth instead of against another model.
//!
//! Conditioning is affine: a condition embedding c is mapped to a mean
//! shift applied to every component, and the null condition is the zero
//! embedding. The score and denoiser routes are implemented independently
//! (responsibility-weighted component scores vs posterior means over x0),
//! which is what makes the Tweedie identity eps_hat = -sigma * score a real
//! cross-check rather than a tautology.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{logsumexp, Real};
use crate::schedule::NoiseSchedule;
use crate::score::{DenoiserFn, ScoreFn};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Component<T> {
    pub weight: T,
    pub mean: Vec<T>,
    pub cov_diag: Vec<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianMixture<T> {
    components: Vec<Component<T>>,
    dim: usize,
}

impl<T: Real> GaussianMixture<T> {
    pub fn new(components: Vec<Component<T>>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::config("components", "mixture needs at least one component"));
        }
        let dim = components[0].mean.len();
        if dim == 0 {
            return Err(Error::config("mean", "components must have dimension >= 1"));
        }
        let mut weight_sum = T::zero();
        for comp in &components {
            if comp.mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "mixture component mean",
                    expected: dim,
                    actual: comp.mean.len(),
                });
            }
            if comp.cov_diag.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "mixture component covariance",
                    expected: dim,
                    actual: comp.cov_diag.len(),
                });
            }
            if !(comp.weight.is_finite() && comp.weight > T::zero()) {
                return Err(Error::config("weights", "component weights must be positive"));
            }
            if comp.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::config("means", "component means must be finite"));
            }
            if comp.cov_diag.iter().any(|v| !(v.is_finite() && *v > T::zero())) {
                return Err(Error::config("cov_diag", "covariance entries must be positive"));
            }
            weight_sum += comp.weight;
        }
        if (weight_sum - T::one()).abs() > T::weight_tol() {
            return Err(Error::config("weights", "component weights must sum to 1"));
        }
        Ok(Self { components, dim })
    }

    pub fn gaussian(mean: Vec<T>, cov_diag: Vec<T>) -> Result<Self> {
        Self::new(vec![Component {
            weight: T::one(),
            mean,
            cov_diag,
        }])
    }

    pub fn from_parts(weights: &[T], means: &[Vec<T>], covs: &[Vec<T>]) -> Result<Self> {
        if weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::config(
                "components",
                "weights, means and covariances must have equal length",
            ));
        }
        Self::new(
            weights
                .iter()
                .zip(means)
                .zip(covs)
                .map(|((&w, m), v)| Component {
                    weight: w,
                    mean: m.clone(),
                    cov_diag: v.clone(),
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component<T>] {
        &self.components
    }

    fn check_point(&self, x: &[T], context: &'static str) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// log w_i + log N(x; mu_i, Sigma_i) per component.
    fn weighted_component_log_densities(&self, x: &[T]) -> Vec<T> {
        let half = T::lit(0.5);
        let ln_2pi = T::lit(LN_2PI);
        self.components
            .iter()
            .map(|comp| {
                let mut acc = comp.weight.ln();
                for j in 0..self.dim {
                    let d = x[j] - comp.mean[j];
                    let v = comp.cov_diag[j];
                    acc -= half * ((ln_2pi + v.ln()) + d * d / v);
                }
                acc
            })
            .collect()
    }

    pub fn log_density(&self, x: &[T]) -> Result<T> {
        self.check_point(x, "log_density input")?;
        Ok(logsumexp(&self.weighted_component_log_densities(x)))
    }

    /// Posterior component probabilities at x.
    pub fn responsibilities(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_point(x, "responsibilities input")?;
        let logs = self.weighted_component_log_densities(x);
        let norm = logsumexp(&logs);
        Ok(logs.iter().map(|&l| (l - norm).exp()).collect())
    }

    /// grad log p(x): responsibility-weighted component scores.
    pub fn score(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_point(x, "score input")?;
        let resp = self.responsibilities(x)?;
        let mut out = vec![T::zero(); self.dim];
        for (comp, &r) in self.components.iter().zip(&resp) {
            for j in 0..self.dim {
                out[j] += r * (comp.mean[j] - x[j]) / comp.cov_diag[j];
            }
        }
        Ok(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let u = T::lit(rng.gen::<f64>());
        let mut acc = T::zero();
        let mut pick = self.components.len() - 1;
        for (i, comp) in self.components.iter().enumerate() {
            acc += comp.weight;
            if u < acc {
                pick = i;
                break;
            }
        }
        let comp = &self.components[pick];
        (0..self.dim)
            .map(|j| comp.mean[j] + comp.cov_diag[j].sqrt() * T::std_normal(rng))
            .collect()
    }

    /// Marginal after forward diffusion to signal scale `gamma` and noise
    /// scale `sigma`: means scale by gamma, covariances become
    /// gamma^2 Sigma + sigma^2 I.
    pub fn diffuse(&self, gamma: T, sigma: T) -> Self {
        let g2 = gamma * gamma;
        let s2 = sigma * sigma;
        Self {
            components: self
                .components
                .iter()
                .map(|comp| Component {
                    weight: comp.weight,
                    mean: comp.mean.iter().map(|&m| gamma * m).collect(),
                    cov_diag: comp.cov_diag.iter().map(|&v| g2 * v + s2).collect(),
                })
                .collect(),
            dim: self.dim,
        }
    }

    /// Mixture with every component mean shifted by `delta`.
    pub fn shifted(&self, delta: &[T]) -> Result<Self> {
        self.check_point(delta, "mean shift")?;
        Ok(Self {
            components: self
                .components
                .iter()
                .map(|comp| Component {
                    weight: comp.weight,
                    mean: comp.mean.iter().zip(delta).map(|(&m, &d)| m + d).collect(),
                    cov_diag: comp.cov_diag.clone(),
                })
                .collect(),
            dim: self.dim,
        })
    }
}

/// Geometric interpolation q_a^alpha q_b^(1-alpha) / Z between two single
/// Gaussians, in closed form: precisions combine linearly.
pub fn geometric_mean_gaussian<T: Real>(
    a: &GaussianMixture<T>,
    b: &GaussianMixture<T>,
    alpha: T,
) -> Result<GaussianMixture<T>> {
    if a.components.len() != 1 || b.components.len() != 1 {
        return Err(Error::Unsupported(
            "geometric mean is closed-form for single Gaussians only".into(),
        ));
    }
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            context: "geometric mean operands",
            expected: a.dim,
            actual: b.dim,
        });
    }
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::config("geo_alpha", "must lie in [0, 1]"));
    }
    let ca = &a.components[0];
    let cb = &b.components[0];
    let mut mean = Vec::with_capacity(a.dim);
    let mut cov = Vec::with_capacity(a.dim);
    for j in 0..a.dim {
        let prec = alpha / ca.cov_diag[j] + (T::one() - alpha) / cb.cov_diag[j];
        let v = T::one() / prec;
        mean.push(v * (alpha * ca.mean[j] / ca.cov_diag[j] + (T::one() - alpha) * cb.mean[j] / cb.cov_diag[j]));
        cov.push(v);
    }
    GaussianMixture::gaussian(mean, cov)
}

/// Affine map from a condition embedding (dimension k) to a mean shift in
/// data space (dimension d).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineMap<T> {
    matrix: Vec<Vec<T>>, // d rows of length k
    offset: Vec<T>,      // length d
}

impl<T: Real> AffineMap<T> {
    pub fn new(matrix: Vec<Vec<T>>, offset: Vec<T>) -> Result<Self> {
        if matrix.len() != offset.len() {
            return Err(Error::config(
                "cond_matrix",
                "matrix row count must match offset length",
            ));
        }
        if matrix.is_empty() {
            return Err(Error::config("cond_matrix", "matrix must have at least one row"));
        }
        let k = matrix[0].len();
        if matrix.iter().any(|row| row.len() != k) {
            return Err(Error::config("cond_matrix", "matrix rows must have equal length"));
        }
        Ok(Self { matrix, offset })
    }

    /// Identity-ish map for k == d experiments: shift = c.
    pub fn identity(dim: usize) -> Self {
        let matrix = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| if i == j { T::one() } else { T::zero() })
                    .collect()
            })
            .collect();
        Self {
            matrix,
            offset: vec![T::zero(); dim],
        }
    }

    pub fn dim_in(&self) -> usize {
        self.matrix[0].len()
    }

    pub fn dim_out(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, c: &[T]) -> Result<Vec<T>> {
        if c.len() != self.dim_in() {
            return Err(Error::DimensionMismatch {
                context: "condition embedding",
                expected: self.dim_in(),
                actual: c.len(),
            });
        }
        Ok(self
            .matrix
            .iter()
            .zip(&self.offset)
            .map(|(row, &b)| row.iter().zip(c).map(|(&a, &cj)| a * cj).sum::<T>() + b)
            .collect())
    }
}

/// A mixture family whose component means shift affinely with a condition
/// embedding. The null condition is the zero embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalFamily<T> {
    base: GaussianMixture<T>,
    condition_map: AffineMap<T>,
}

impl<T: Real> ConditionalFamily<T> {
    pub fn new(base: GaussianMixture<T>, condition_map: AffineMap<T>) -> Result<Self> {
        if condition_map.dim_out() != base.dim() {
            return Err(Error::DimensionMismatch {
                context: "condition map output",
                expected: base.dim(),
                actual: condition_map.dim_out(),
            });
        }
        Ok(Self { base, condition_map })
    }

    /// Family with no usable condition channel (zero map, k = 1).
    pub fn unconditional(base: GaussianMixture<T>) -> Self {
        let d = base.dim();
        let map = AffineMap {
            matrix: vec![vec![T::zero()]; d],
            offset: vec![T::zero(); d],
        };
        Self {
            base,
            condition_map: map,
        }
    }

    pub fn base(&self) -> &GaussianMixture<T> {
        &self.base
    }

    pub fn condition_map(&self) -> &AffineMap<T> {
        &self.condition_map
    }

    pub fn embedding_dim(&self) -> usize {
        self.condition_map.dim_in()
    }

    pub fn null_condition(&self) -> Vec<T> {
        vec![T::zero(); self.embedding_dim()]
    }

    pub fn conditioned(&self, c: &[T]) -> Result<GaussianMixture<T>> {
        let shift = self.condition_map.apply(c)?;
        self.base.shifted(&shift)
    }
}

/// Exact score oracle: a conditional family tied to a noise schedule. All
/// time-indexed operations take a schedule grid index.
#[derive(Debug, Clone)]
pub struct ScoreOracle<T> {
    family: ConditionalFamily<T>,
    schedule: Arc<NoiseSchedule<T>>,
}

impl<T: Real> ScoreOracle<T> {
    pub fn new(family: ConditionalFamily<T>, schedule: Arc<NoiseSchedule<T>>) -> Self {
        Self { family, schedule }
    }

    pub fn family(&self) -> &ConditionalFamily<T> {
        &self.family
    }

    pub fn schedule(&self) -> &Arc<NoiseSchedule<T>> {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.family.base().dim()
    }

    pub fn conditioned(&self, c: &[T]) -> Result<GaussianMixture<T>> {
        self.family.conditioned(c)
    }

    /// Clean-data log-density log p_0(x | c).
    pub fn data_log_density(&self, x: &[T], c: &[T]) -> Result<T> {
        self.conditioned(c)?.log_density(x)
    }

    pub fn diffused(&self, step: usize, c: &[T]) -> Result<GaussianMixture<T>> {
        let g = self.schedule.gamma(step);
        let s = self.schedule.sigma(step);
        Ok(self.conditioned(c)?.diffuse(g, s))
    }

    pub fn diffused_log_density(&self, x: &[T], step: usize, c: &[T]) -> Result<T> {
        self.diffused(step, c)?.log_density(x)
    }

    pub fn score(&self, x: &[T], step: usize, c: &[T]) -> Result<Vec<T>> {
        self.diffused(step, c)?.score(x)
    }

    /// MMSE noise prediction E[(x_t - gamma_t x0) / sigma_t | x_t = x],
    /// computed through per-component posterior means over x0 (not through
    /// the score, so the Tweedie identity stays an independent check).
    pub fn mmse_denoiser(&self, x: &[T], step: usize, c: &[T]) -> Result<Vec<T>> {
        let base = self.conditioned(c)?;
        denoise_with(&base, self.schedule.gamma(step), self.schedule.sigma(step), x)
    }

    /// Same as [`Self::mmse_denoiser`] but addressed by time value; times
    /// below the schedule clamp are a domain error.
    pub fn mmse_denoiser_at_time(&self, x: &[T], t: T, c: &[T]) -> Result<Vec<T>> {
        let step = self.schedule.grid_index_of(t)?;
        self.mmse_denoiser(x, step, c)
    }

    /// Score function with the condition frozen; diffused mixtures are
    /// tabulated per grid step up front so sampling loops stay allocation
    /// light.
    pub fn score_fn(&self, c: &[T]) -> Result<OracleScore<T>> {
        let base = self.conditioned(c)?;
        let tables = (0..self.schedule.num_steps())
            .map(|i| base.diffuse(self.schedule.gamma(i), self.schedule.sigma(i)))
            .collect();
        Ok(OracleScore { tables })
    }

    /// Denoiser with the condition frozen (posterior-mean route).
    pub fn denoiser_fn(&self, c: &[T]) -> Result<OracleDenoiser<T>> {
        Ok(OracleDenoiser {
            base: self.conditioned(c)?,
            schedule: Arc::clone(&self.schedule),
        })
    }

    /// Classifier-free-guidance score with the condition frozen.
    pub fn cfg_score_fn(&self, c: &[T], lambda: T) -> Result<CfgScore<T>> {
        Ok(CfgScore {
            cond: self.score_fn(c)?,
            null: self.score_fn(&self.family.null_condition())?,
            lambda,
        })
    }
}

fn denoise_with<T: Real>(
    base: &GaussianMixture<T>,
    gamma: T,
    sigma: T,
    x: &[T],
) -> Result<Vec<T>> {
    let diffused = base.diffuse(gamma, sigma);
    let resp = diffused.responsibilities(x)?;
    let dim = base.dim();
    let s2 = sigma * sigma;
    let mut posterior_x0 = vec![T::zero(); dim];
    for (comp, &r) in base.components().iter().zip(&resp) {
        for j in 0..dim {
            let a = gamma * gamma * comp.cov_diag[j] + s2;
            let m_post = comp.mean[j] + gamma * comp.cov_diag[j] / a * (x[j] - gamma * comp.mean[j]);
            posterior_x0[j] += r * m_post;
        }
    }
    Ok((0..dim)
        .map(|j| (x[j] - gamma * posterior_x0[j]) / sigma)
        .collect())
}

pub struct OracleScore<T> {
    tables: Vec<GaussianMixture<T>>,
}

impl<T: Real> ScoreFn<T> for OracleScore<T> {
    fn eval(&self, x: &[T], step: usize) -> Result<Vec<T>> {
        self.tables[step].score(x)
    }
}

pub struct OracleDenoiser<T> {
    base: GaussianMixture<T>,
    schedule: Arc<NoiseSchedule<T>>,
}

impl<T: Real> DenoiserFn<T> for OracleDenoiser<T> {
    fn eval(&self, x: &[T], step: usize) -> Result<Vec<T>> {
        denoise_with(&self.base, self.schedule.gamma(step), self.schedule.sigma(step), x)
    }
}

pub struct CfgScore<T> {
    cond: OracleScore<T>,
    null: OracleScore<T>,
    lambda: T,
}

impl<T: Real> ScoreFn<T> for CfgScore<T> {
    fn eval(&self, x: &[T], step: usize) -> Result<Vec<T>> {
        let sc = self.cond.eval(x, step)?;
        let mut sn = self.null.eval(x, step)?;
        for j in 0..sn.len() {
            sn[j] = sn[j] + self.lambda * (sc[j] - sn[j]);
        }
        Ok(sn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Posterior weights w_i p_t^i(x|c) / sum_j w_j p_t^j(x|c): the mixture
    /// score is then exactly the score of the weighted mixture density.
    Exact,
    /// The supplied weights are used as-is at every (x, t).
    Fixed,
}

/// Score combination across oracles sharing a schedule and condition.
pub fn mixture_score<T: Real>(
    oracles: &[&ScoreOracle<T>],
    weights: &[T],
    mode: WeightMode,
    x: &[T],
    step: usize,
    c: &[T],
) -> Result<Vec<T>> {
    if oracles.is_empty() {
        return Err(Error::config("oracles", "need at least one oracle"));
    }
    if oracles.len() != weights.len() {
        return Err(Error::config(
            "weights",
            "one weight per oracle is required",
        ));
    }
    let dim = oracles[0].dim();
    for o in oracles {
        if o.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "mixture_score oracle dims",
                expected: dim,
                actual: o.dim(),
            });
        }
    }
    let mut wsum = T::zero();
    for &w in weights {
        if !(w.is_finite() && w >= T::zero()) {
            return Err(Error::config("weights", "weights must be non-negative"));
        }
        wsum += w;
    }
    if (wsum - T::one()).abs() > T::weight_tol() {
        return Err(Error::config("weights", "weights must sum to 1"));
    }

    let scores: Vec<Vec<T>> = oracles
        .iter()
        .map(|o| o.score(x, step, c))
        .collect::<Result<_>>()?;

    let effective: Vec<T> = match mode {
        WeightMode::Fixed => weights.to_vec(),
        WeightMode::Exact => {
            let logs: Vec<T> = oracles
                .iter()
                .zip(weights)
                .map(|(o, &w)| Ok(w.ln() + o.diffused_log_density(x, step, c)?))
                .collect::<Result<_>>()?;
            let norm = logsumexp(&logs);
            logs.iter().map(|&l| (l - norm).exp()).collect()
        }
    };

    let mut out = vec![T::zero(); dim];
    for (s, &w) in scores.iter().zip(&effective) {
        for j in 0..dim {
            out[j] += w * s[j];
        }
    }
    Ok(out)
}

/// Classifier-free guidance: s(x, t, null) + lambda (s(x, t, c) - s(x, t, null)).
pub fn cfg_score<T: Real>(
    oracle: &ScoreOracle<T>,
    x: &[T],
    step: usize,
    c: &[T],
    lambda: T,
) -> Result<Vec<T>> {
    let null = oracle.family().null_condition();
    let sn = oracle.score(x, step, &null)?;
    let sc = oracle.score(x, step, c)?;
    Ok(sn
        .iter()
        .zip(&sc)
        .map(|(&n, &cv)| n + lambda * (cv - n))
        .collect())
}

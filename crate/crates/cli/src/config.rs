//! Experiment configuration: one TOML file describing the scenario (noise
//! schedule, safe and private models, retrieval), the sampling method, and
//! the audit parameters. Command-line flags override file values; the
//! resolved config is validated before any compute and hashed into the run
//! manifest so artifacts stay traceable to the exact inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cpr_core::cpr::DEFAULT_SELECTOR_DRAWS;
use cpr_core::dist::{AffineMap, ConditionalFamily, GaussianMixture};
use cpr_core::sampler::{DEFAULT_LANGEVIN_EPS0, DEFAULT_LANGEVIN_STEPS};
use cpr_core::schedule::{
    AncestralKind, NoiseSchedule, ScheduleKind, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN,
    DEFAULT_NUM_STEPS, DEFAULT_T_MIN,
};

use crate::error::{CliError, CliResult};

pub const DEFAULT_AUDIT_DRAWS: usize = 256;
pub const DEFAULT_KL_REPLICATES: usize = 1000;
pub const DEFAULT_CONFIDENCE: f64 = 0.95;
pub const DEFAULT_MAX_ATTEMPTS: u64 = 10_000;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random draw in a run flows from it through named
    /// sub-streams, so re-runs are bit-identical.
    pub seed: u64,
    pub samples: usize,
    /// Excluded from serialization so the manifest's config hash does not
    /// depend on where the artifacts land.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    pub safe: MixtureSpec,
    #[serde(default)]
    pub private: Option<PrivateSpec>,
    #[serde(default)]
    pub retrieval: Option<RetrievalSpec>,
    pub method: MethodSpec,
    #[serde(default)]
    pub audit: AuditSpec,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub kind: String,
    pub beta_min: f64,
    pub beta_max: f64,
    pub num_steps: usize,
    pub t_min: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: "linear".into(),
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            num_steps: DEFAULT_NUM_STEPS,
            t_min: DEFAULT_T_MIN,
        }
    }
}

impl ScheduleSpec {
    pub fn kind(&self) -> CliResult<ScheduleKind> {
        match self.kind.as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "constant" => Ok(ScheduleKind::Constant),
            other => Err(CliError::config(
                "schedule.kind",
                format!("unknown kind {other:?}, expected linear, cosine, or constant"),
            )),
        }
    }

    pub fn build(&self) -> CliResult<NoiseSchedule<f64>> {
        Ok(NoiseSchedule::build(
            self.kind()?,
            self.beta_min,
            self.beta_max,
            self.num_steps,
            self.t_min,
        )?)
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub ancestral: String,
    pub langevin_steps: usize,
    pub langevin_eps0: f64,
    pub denoise_to_zero: bool,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            ancestral: "stochastic".into(),
            langevin_steps: DEFAULT_LANGEVIN_STEPS,
            langevin_eps0: DEFAULT_LANGEVIN_EPS0,
            denoise_to_zero: true,
        }
    }
}

impl SamplerSpec {
    pub fn ancestral_kind(&self) -> CliResult<AncestralKind> {
        match self.ancestral.as_str() {
            "stochastic" => Ok(AncestralKind::Stochastic),
            "deterministic" => Ok(AncestralKind::Deterministic),
            other => Err(CliError::config(
                "sampler.ancestral",
                format!("unknown kind {other:?}, expected stochastic or deterministic"),
            )),
        }
    }
}

/// A diagonal Gaussian mixture plus an optional affine conditioning map
/// from embedding space to a mean shift in data space.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<f64>>,
    #[serde(default)]
    pub condition_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub condition_offset: Option<Vec<f64>>,
    #[serde(default)]
    pub condition: Option<Vec<f64>>,
}

impl MixtureSpec {
    pub fn mixture(&self, section: &str) -> CliResult<GaussianMixture<f64>> {
        GaussianMixture::from_parts(&self.weights, &self.means, &self.covs)
            .map_err(|e| CliError::config(format!("{section}.weights"), e.to_string()))
    }

    pub fn family(&self, section: &str) -> CliResult<ConditionalFamily<f64>> {
        let base = self.mixture(section)?;
        match &self.condition_matrix {
            None => {
                if self.condition_offset.is_some() {
                    return Err(CliError::config(
                        format!("{section}.condition_offset"),
                        "requires condition_matrix",
                    ));
                }
                Ok(ConditionalFamily::unconditional(base))
            }
            Some(matrix) => {
                let offset = self
                    .condition_offset
                    .clone()
                    .unwrap_or_else(|| vec![0.0; matrix.len()]);
                let map = AffineMap::new(matrix.clone(), offset).map_err(|e| {
                    CliError::config(format!("{section}.condition_matrix"), e.to_string())
                })?;
                Ok(ConditionalFamily::new(base, map)
                    .map_err(|e| CliError::config(format!("{section}.condition_matrix"), e.to_string()))?)
            }
        }
    }

    /// The conditioning vector to sample under: the explicit one if given,
    /// otherwise the family's null condition.
    pub fn resolve_condition(
        &self,
        family: &ConditionalFamily<f64>,
        section: &str,
    ) -> CliResult<Vec<f64>> {
        match &self.condition {
            None => Ok(family.null_condition()),
            Some(c) => {
                if c.len() != family.embedding_dim() {
                    return Err(CliError::config(
                        format!("{section}.condition"),
                        format!(
                            "length {} does not match the embedding dimension {}",
                            c.len(),
                            family.embedding_dim()
                        ),
                    ));
                }
                Ok(c.clone())
            }
        }
    }
}

/// The private side: either an analytic mixture like [`MixtureSpec`] or a
/// datastore path for retrieval-backed scenarios.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PrivateSpec {
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub covs: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub condition_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub condition_offset: Option<Vec<f64>>,
    #[serde(default)]
    pub condition: Option<Vec<f64>>,
    #[serde(default)]
    pub store: Option<PathBuf>,
}

impl PrivateSpec {
    pub fn is_store(&self) -> bool {
        self.store.is_some()
    }

    pub fn as_mixture_spec(&self) -> CliResult<MixtureSpec> {
        match (&self.weights, &self.means, &self.covs) {
            (Some(weights), Some(means), Some(covs)) => Ok(MixtureSpec {
                weights: weights.clone(),
                means: means.clone(),
                covs: covs.clone(),
                condition_matrix: self.condition_matrix.clone(),
                condition_offset: self.condition_offset.clone(),
                condition: self.condition.clone(),
            }),
            _ => Err(CliError::config(
                "private.weights",
                "an analytic private model needs weights, means, and covs",
            )),
        }
    }

    fn validate(&self) -> CliResult<()> {
        if self.is_store() {
            if self.weights.is_some() || self.means.is_some() || self.covs.is_some() {
                return Err(CliError::config(
                    "private.store",
                    "give either a store path or an analytic mixture, not both",
                ));
            }
            if self.condition_matrix.is_some() || self.condition.is_some() {
                return Err(CliError::config(
                    "private.condition",
                    "a store-backed private model is conditioned through retrieval",
                ));
            }
            return Ok(());
        }
        self.as_mixture_spec().map(|_| ())
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSpec {
    /// Number of records to retrieve.
    pub m: usize,
    /// Weight on the query-conditioned score.
    pub w0: f64,
    /// Weight on the retrieval-conditioned score.
    pub w1: f64,
    pub query: Vec<f64>,
}

impl Default for RetrievalSpec {
    fn default() -> Self {
        Self {
            m: 1,
            w0: 0.5,
            w1: 0.5,
            query: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub period: Option<usize>,
    #[serde(default)]
    pub phase: Option<usize>,
    #[serde(default)]
    pub draws: Option<usize>,
    #[serde(default)]
    pub k: Option<f64>,
    #[serde(default)]
    pub max_attempts: Option<u64>,
}

/// Resolved sampling method. Parameters irrelevant to the chosen name are
/// ignored so one config can be re-run under several methods via the
/// `--method` flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Safe,
    Rag,
    CprKl { alpha: f64 },
    CprAlt { period: usize, phase: usize },
    CprMin { draws: usize },
    CpK { k: f64, max_attempts: u64 },
}

impl Method {
    pub fn key(&self) -> &'static str {
        match self {
            Method::Safe => "safe",
            Method::Rag => "rag",
            Method::CprKl { .. } => "cpr-kl",
            Method::CprAlt { .. } => "cpr-alt",
            Method::CprMin { .. } => "cpr-min",
            Method::CpK { .. } => "cp-k",
        }
    }

    pub fn needs_private(&self) -> bool {
        !matches!(self, Method::Safe)
    }

    /// Methods that pick one model per reverse transition and so carry the
    /// per-step divergence budget.
    pub fn is_choose(&self) -> bool {
        matches!(self, Method::CprAlt { .. } | Method::CprMin { .. })
    }
}

impl MethodSpec {
    pub fn resolve(&self) -> CliResult<Method> {
        match self.name.as_str() {
            "safe" => Ok(Method::Safe),
            "rag" => Ok(Method::Rag),
            "cpr-kl" => {
                let alpha = self.alpha.unwrap_or(0.5);
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(CliError::config("method.alpha", "must lie in [0, 1]"));
                }
                Ok(Method::CprKl { alpha })
            }
            "cpr-alt" => Ok(Method::CprAlt {
                period: self.period.unwrap_or(2),
                phase: self.phase.unwrap_or(0),
            }),
            "cpr-min" => Ok(Method::CprMin {
                draws: self.draws.unwrap_or(DEFAULT_SELECTOR_DRAWS),
            }),
            "cp-k" => {
                let k = self.k.ok_or_else(|| {
                    CliError::config("method.k", "cp-k needs a log-ratio budget k")
                })?;
                Ok(Method::CpK {
                    k,
                    max_attempts: self.max_attempts.unwrap_or(DEFAULT_MAX_ATTEMPTS),
                })
            }
            other => Err(CliError::config(
                "method.name",
                format!(
                    "unknown method {other:?}, expected safe, rag, cpr-kl, cpr-alt, cpr-min, or cp-k"
                ),
            )),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSpec {
    /// Noise draws per point for estimated log-ratios.
    pub draws: usize,
    pub bins: usize,
    /// Bootstrap replicates for the KL confidence interval.
    pub kl_replicates: usize,
    pub confidence: f64,
}

impl Default for AuditSpec {
    fn default() -> Self {
        Self {
            draws: DEFAULT_AUDIT_DRAWS,
            bins: cpr_core::audit::DEFAULT_HISTOGRAM_BINS,
            kl_replicates: DEFAULT_KL_REPLICATES,
            confidence: DEFAULT_CONFIDENCE,
        }
    }
}

/// Command-line overrides applied to a loaded config before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<String>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub draws: Option<usize>,
    pub bins: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(name) = &overrides.method {
            self.method.name = name.clone();
        }
        if let Some(samples) = overrides.samples {
            self.samples = samples;
        }
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(dir) = &overrides.output_dir {
            self.output_dir = Some(dir.clone());
        }
        if let Some(draws) = overrides.draws {
            self.audit.draws = draws;
        }
        if let Some(bins) = overrides.bins {
            self.audit.bins = bins;
        }
    }

    /// The store path resolved relative to the config file's directory.
    pub fn store_path(&self, config_path: &Path) -> Option<PathBuf> {
        let store = self.private.as_ref()?.store.as_ref()?;
        if store.is_absolute() {
            Some(store.clone())
        } else {
            Some(config_path.parent().unwrap_or(Path::new(".")).join(store))
        }
    }

    /// Cross-field validation; cheap checks with field names, before any
    /// compute. Numeric and dimensional details are re-checked by the
    /// lower layers.
    pub fn validate(&self, config_path: &Path) -> CliResult<()> {
        if self.samples == 0 {
            return Err(CliError::config("samples", "need at least one sample"));
        }
        let method = self.method.resolve()?;
        self.schedule.kind()?;
        self.sampler.ancestral_kind()?;
        if self.sampler.langevin_steps == 0 {
            return Err(CliError::config(
                "sampler.langevin_steps",
                "need at least one inner step",
            ));
        }
        if method.needs_private() {
            let private = self.private.as_ref().ok_or_else(|| {
                CliError::config(
                    "private",
                    format!("required for method {}", method.key()),
                )
            })?;
            private.validate()?;
            match method {
                Method::Rag if !private.is_store() => {
                    return Err(CliError::config(
                        "private.store",
                        "rag samples from a retrieval mixture and needs a store path",
                    ));
                }
                Method::CpK { .. } if private.is_store() => {
                    return Err(CliError::config(
                        "method.name",
                        "cp-k needs an analytic private model for exact log-ratios",
                    ));
                }
                Method::CpK { k, .. } if !(k >= 0.0) => {
                    return Err(CliError::config("method.k", "must be non-negative"));
                }
                _ => {}
            }
        }
        let store_backed = self.private.as_ref().is_some_and(PrivateSpec::is_store);
        if store_backed {
            let retrieval = self.retrieval.as_ref().ok_or_else(|| {
                CliError::config("retrieval", "required for a store-backed private model")
            })?;
            if retrieval.m == 0 {
                return Err(CliError::config("retrieval.m", "must retrieve at least one record"));
            }
            if !(retrieval.w0 >= 0.0 && retrieval.w1 >= 0.0) {
                return Err(CliError::config("retrieval.w0", "weights must be non-negative"));
            }
            if (retrieval.w0 + retrieval.w1 - 1.0).abs() > 1e-9 {
                return Err(CliError::config("retrieval.w0", "weights must sum to 1"));
            }
            if retrieval.query.is_empty() {
                return Err(CliError::config("retrieval.query", "must not be empty"));
            }
            let store = self.store_path(config_path).expect("store-backed private");
            if !store.is_file() {
                return Err(CliError::config(
                    "private.store",
                    format!("no such file: {}", store.display()),
                ));
            }
        } else if self.retrieval.is_some() {
            return Err(CliError::config(
                "retrieval",
                "only meaningful with a store-backed private model",
            ));
        }
        if self.audit.bins == 0 {
            return Err(CliError::config("audit.bins", "need at least one bin"));
        }
        if self.audit.draws == 0 {
            return Err(CliError::config("audit.draws", "need at least one draw"));
        }
        if !(self.audit.confidence > 0.0 && self.audit.confidence < 1.0) {
            return Err(CliError::config("audit.confidence", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"
            seed = 7
            samples = 10

            [safe]
            weights = [1.0]
            means = [[-1.0]]
            covs = [[1.0]]

            [method]
            name = "safe"
        "#
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config: ExperimentConfig = toml::from_str(minimal()).unwrap();
        config.validate(Path::new("lab.toml")).unwrap();
        assert_eq!(config.schedule.num_steps, DEFAULT_NUM_STEPS);
        assert_eq!(config.sampler.langevin_steps, DEFAULT_LANGEVIN_STEPS);
        assert_eq!(config.audit.bins, cpr_core::audit::DEFAULT_HISTOGRAM_BINS);
        assert_eq!(config.method.resolve().unwrap(), Method::Safe);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = minimal().replace("samples = 10", "samples = 10\nsmaples = 3");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn method_resolution_checks_required_params() {
        let mut config: ExperimentConfig = toml::from_str(minimal()).unwrap();
        config.method.name = "cp-k".into();
        let err = config.method.resolve().unwrap_err();
        assert!(err.to_string().contains("method.k"));
        config.method.k = Some(1.0);
        assert_eq!(
            config.method.resolve().unwrap(),
            Method::CpK { k: 1.0, max_attempts: DEFAULT_MAX_ATTEMPTS }
        );
    }

    #[test]
    fn retrieval_weights_must_sum_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("store.jsonl");
        std::fs::write(&store, "").unwrap();
        let text = format!(
            r#"
                seed = 7
                samples = 10

                [safe]
                weights = [1.0]
                means = [[-1.0]]
                covs = [[1.0]]
                condition_matrix = [[1.0]]

                [private]
                store = {store:?}

                [retrieval]
                w0 = 0.7
                w1 = 0.6
                query = [0.0]

                [method]
                name = "rag"
            "#
        );
        let config: ExperimentConfig = toml::from_str(&text).unwrap();
        let err = config.validate(Path::new("lab.toml")).unwrap_err();
        assert!(err.to_string().contains("retrieval.w0"));
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut config: ExperimentConfig = toml::from_str(minimal()).unwrap();
        config.apply(&Overrides {
            method: Some("cpr-kl".into()),
            samples: Some(3),
            seed: Some(99),
            ..Overrides::default()
        });
        assert_eq!(config.samples, 3);
        assert_eq!(config.seed, 99);
        assert!(matches!(config.method.resolve().unwrap(), Method::CprKl { .. }));
    }
}

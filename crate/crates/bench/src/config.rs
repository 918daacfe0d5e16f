//! Experiment configuration: TOML parsing with strict key checking, defaults,
//! invariant checks and a canonical hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowpath_core::{
    AdaptiveConfig, CoefficientMode, FrozenRule, Inversion, NoiseSchedule, SamplerId, TargetDistribution,
    TimeMap,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{BenchError, Result};

pub const DEFAULT_STEPS: [usize; 6] = [5, 6, 7, 8, 9, 10];
pub const DEFAULT_ORDER_STEPS: [usize; 5] = [10, 20, 40, 80, 160];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_steps")]
    pub steps: Vec<usize>,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_samplers", with = "str_list")]
    pub samplers: Vec<SamplerId>,
    /// Worker threads; the CLI flag and `FLOWPATH_WORKERS` take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_fine_steps")]
    pub oracle_fine_steps: usize,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub transform: TransformSpec,
    #[serde(default)]
    pub adaptive: AdaptiveSpec,
    /// Per-sampler adaptive settings, keyed by sampler id.
    #[serde(default)]
    pub overrides: BTreeMap<String, AdaptiveOverride>,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default)]
    pub order: OrderSpec,
    pub targets: Vec<TargetSpec>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("flowpath-out")
}
fn default_steps() -> Vec<usize> {
    DEFAULT_STEPS.to_vec()
}
fn default_chains() -> usize {
    10_000
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_samplers() -> Vec<SamplerId> {
    vec![
        SamplerId::Ddim,
        SamplerId::EulerFm,
        SamplerId::HeunFm,
        SamplerId::Flops,
        SamplerId::Aflops,
        SamplerId::AEuler,
    ]
}
fn default_fine_steps() -> usize {
    10_000
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    VpLinear {
        #[serde(default = "default_beta_min")]
        beta_min: f64,
        #[serde(default = "default_beta_max")]
        beta_max: f64,
        #[serde(default = "default_horizon")]
        horizon: f64,
    },
    VpCosine {
        #[serde(default = "default_offset")]
        offset: f64,
        horizon: f64,
    },
    /// Polynomial drift and diffusion coefficients in ascending powers of τ.
    Generic {
        drift: Vec<f64>,
        diffusion: Vec<f64>,
        #[serde(default = "default_horizon")]
        horizon: f64,
        #[serde(default = "default_panels")]
        panels: usize,
    },
}

fn default_beta_min() -> f64 {
    0.1
}
fn default_beta_max() -> f64 {
    20.0
}
fn default_horizon() -> f64 {
    1.0
}
fn default_offset() -> f64 {
    0.008
}
fn default_panels() -> usize {
    flowpath_core::schedule::DEFAULT_PANELS
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::VpLinear {
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
            horizon: default_horizon(),
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> flowpath_core::Result<NoiseSchedule<f64>> {
        match self {
            ScheduleSpec::VpLinear {
                beta_min,
                beta_max,
                horizon,
            } => NoiseSchedule::vp_linear(*beta_min, *beta_max, *horizon),
            ScheduleSpec::VpCosine { offset, horizon } => NoiseSchedule::vp_cosine(*offset, *horizon),
            ScheduleSpec::Generic {
                drift,
                diffusion,
                horizon,
                panels,
            } => NoiseSchedule::generic(drift.clone(), diffusion.clone(), *horizon, *panels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    #[serde(default, with = "str_value")]
    pub frozen_rule: FrozenRule,
    /// Snap diffusion times to a grid of this many steps instead of solving
    /// for them continuously.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrete_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSpec {
    #[serde(default = "default_clamp")]
    pub clamp: [f64; 2],
    #[serde(default, with = "str_value")]
    pub coefficients: CoefficientMode,
    #[serde(default = "default_degenerate_eps")]
    pub degenerate_eps: f64,
}

fn default_clamp() -> [f64; 2] {
    [-1.0, 1.0]
}
fn default_degenerate_eps() -> f64 {
    1e-12
}

impl Default for AdaptiveSpec {
    fn default() -> Self {
        Self {
            clamp: default_clamp(),
            coefficients: CoefficientMode::default(),
            degenerate_eps: default_degenerate_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_str_value")]
    pub coefficients: Option<CoefficientMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate_eps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    #[serde(default = "default_true")]
    pub sliced_w2: bool,
    #[serde(default = "default_true")]
    pub energy: bool,
    #[serde(default = "default_true")]
    pub moments: bool,
    #[serde(default = "default_projections")]
    pub projections: usize,
    /// Chains per cell that also get an RK4 reference trajectory (0 = none).
    #[serde(default)]
    pub oracle_chains: usize,
    /// Endpoints kept per sampler for the scatter plots.
    #[serde(default = "default_plot_points")]
    pub plot_points: usize,
}

fn default_projections() -> usize {
    flowpath_core::metrics::DEFAULT_PROJECTIONS
}
fn default_plot_points() -> usize {
    1500
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            sliced_w2: true,
            energy: true,
            moments: true,
            projections: default_projections(),
            oracle_chains: 0,
            plot_points: default_plot_points(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderSpec {
    #[serde(default = "default_order_steps")]
    pub steps: Vec<usize>,
    #[serde(default = "default_order_chains")]
    pub chains: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_order_samplers", with = "str_list")]
    pub samplers: Vec<SamplerId>,
    /// Target names; empty means every target.
    #[serde(default)]
    pub targets: Vec<String>,
}

fn default_order_steps() -> Vec<usize> {
    DEFAULT_ORDER_STEPS.to_vec()
}
fn default_order_chains() -> usize {
    32
}
fn default_order_samplers() -> Vec<SamplerId> {
    vec![
        SamplerId::EulerFm,
        SamplerId::Flops,
        SamplerId::Aflops,
        SamplerId::HeunFm,
        SamplerId::AEuler,
    ]
}

impl Default for OrderSpec {
    fn default() -> Self {
        Self {
            steps: default_order_steps(),
            chains: default_order_chains(),
            seed: 0,
            samplers: default_order_samplers(),
            targets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    Dirac {
        name: String,
        mean: Vec<f64>,
    },
    StandardGaussian {
        name: String,
        dim: usize,
    },
    Gaussian {
        name: String,
        mean: Vec<f64>,
        /// Rows of the covariance matrix.
        cov: Vec<Vec<f64>>,
    },
    Mixture {
        name: String,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    },
    /// Equal-weight isotropic 2-D components evenly spaced on a circle.
    Ring {
        name: String,
        components: usize,
        radius: f64,
        std: f64,
        #[serde(default)]
        phase_deg: f64,
    },
}

impl TargetSpec {
    pub fn name(&self) -> &str {
        match self {
            TargetSpec::Dirac { name, .. }
            | TargetSpec::StandardGaussian { name, .. }
            | TargetSpec::Gaussian { name, .. }
            | TargetSpec::Mixture { name, .. }
            | TargetSpec::Ring { name, .. } => name,
        }
    }

    pub fn build(&self) -> flowpath_core::Result<TargetDistribution<f64>> {
        match self {
            TargetSpec::Dirac { mean, .. } => TargetDistribution::dirac(mean.clone()),
            TargetSpec::StandardGaussian { dim, .. } => TargetDistribution::standard_gaussian(*dim),
            TargetSpec::Gaussian { mean, cov, .. } => {
                TargetDistribution::gaussian(mean.clone(), flatten(cov))
            }
            TargetSpec::Mixture {
                weights, means, covs, ..
            } => TargetDistribution::mixture(
                weights.clone(),
                means.clone(),
                covs.iter().map(|c| flatten(c)).collect(),
            ),
            TargetSpec::Ring {
                components,
                radius,
                std,
                phase_deg,
                ..
            } => {
                if *components == 0 {
                    return Err(flowpath_core::Error::Target(
                        "ring needs at least one component".into(),
                    ));
                }
                let k = *components;
                let means = (0..k)
                    .map(|i| {
                        let angle = (phase_deg + 360.0 * i as f64 / k as f64).to_radians();
                        vec![radius * angle.cos(), radius * angle.sin()]
                    })
                    .collect();
                let var = std * std;
                TargetDistribution::mixture(vec![1.0 / k as f64; k], means, vec![vec![var, 0.0, 0.0, var]; k])
            }
        }
    }
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        // Let the core constructor report the shape problem.
        return rows
            .iter()
            .flatten()
            .copied()
            .chain(std::iter::once(f64::NAN))
            .collect();
    }
    rows.iter().flatten().copied().collect()
}

/// A validated config with its core objects built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub schedule: NoiseSchedule<f64>,
    pub map: TimeMap<f64>,
    pub targets: Vec<(String, TargetDistribution<f64>)>,
    adaptive: BTreeMap<SamplerId, AdaptiveConfig<f64>>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let cfg = &config;
        let fail = |msg: String| Err(BenchError::Config(msg));

        if cfg.samplers.is_empty() {
            return fail("`samplers` must not be empty".into());
        }
        if cfg.steps.is_empty() {
            return fail("`steps` must not be empty".into());
        }
        if let Some(dup) = first_duplicate(&cfg.samplers) {
            return fail(format!("`samplers` lists `{dup}` twice"));
        }
        if let Some(dup) = first_duplicate(&cfg.steps) {
            return fail(format!("`steps` lists {dup} twice"));
        }
        if cfg.steps.contains(&0) {
            return fail("`steps` entries must be at least 1".into());
        }
        if cfg.samplers.iter().any(|s| s.is_adaptive()) && cfg.steps.contains(&1) {
            return fail(
                "`steps` = 1 is not allowed with adaptive samplers (they need a warm-up step)".into(),
            );
        }
        if cfg.seeds.is_empty() {
            return fail("`seeds` must not be empty".into());
        }
        if let Some(dup) = first_duplicate(&cfg.seeds) {
            return fail(format!("`seeds` are not distinct: {dup} appears twice"));
        }
        if cfg.chains < 2 {
            return fail(format!("`chains` must be at least 2, got {}", cfg.chains));
        }
        if cfg.oracle_fine_steps < flowpath_core::sampler::MIN_ORACLE_STEPS {
            return fail(format!(
                "`oracle_fine_steps` must be at least {}, got {}",
                flowpath_core::sampler::MIN_ORACLE_STEPS,
                cfg.oracle_fine_steps
            ));
        }
        if cfg.metrics.projections == 0 {
            return fail("`metrics.projections` must be at least 1".into());
        }
        if cfg.metrics.oracle_chains > cfg.chains {
            return fail("`metrics.oracle_chains` exceeds `chains`".into());
        }

        let schedule = cfg
            .schedule
            .build()
            .map_err(|e| BenchError::Config(format!("`schedule`: {e}")))?;
        let inversion = match cfg.transform.discrete_steps {
            Some(steps) => Inversion::Discrete { steps },
            None => Inversion::Continuous,
        };
        let map = TimeMap::with_inversion(schedule.clone(), inversion)
            .map_err(|e| BenchError::Config(format!("`schedule`/`transform`: {e}")))?;

        if cfg.targets.is_empty() {
            return fail("`targets` must not be empty".into());
        }
        let mut names = BTreeSet::new();
        let mut targets = Vec::with_capacity(cfg.targets.len());
        for (i, spec) in cfg.targets.iter().enumerate() {
            let name = spec.name();
            if name.is_empty()
                || !name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return fail(format!(
                    "targets[{i}].name `{name}` must be nonempty and use only letters, digits, `-` and `_`"
                ));
            }
            if !names.insert(name.to_string()) {
                return fail(format!("targets[{i}].name `{name}` is used twice"));
            }
            let target = spec
                .build()
                .map_err(|e| BenchError::Config(format!("targets[{i}] ({name}): {e}")))?;
            targets.push((name.to_string(), target));
        }

        let base = AdaptiveConfig::new(
            (cfg.adaptive.clamp[0], cfg.adaptive.clamp[1]),
            cfg.adaptive.coefficients,
            cfg.adaptive.degenerate_eps,
        )
        .map_err(|e| BenchError::Config(format!("`adaptive`: {e}")))?;
        let mut adaptive = BTreeMap::new();
        for id in [SamplerId::Aflops, SamplerId::AEuler] {
            adaptive.insert(id, base);
        }
        for (key, o) in &cfg.overrides {
            let id: SamplerId = key
                .parse()
                .map_err(|e| BenchError::Config(format!("`overrides.{key}`: {e}")))?;
            if !id.is_adaptive() {
                return fail(format!(
                    "`overrides.{key}`: only adaptive samplers take adaptive settings"
                ));
            }
            let clamp = o.clamp.unwrap_or(cfg.adaptive.clamp);
            let merged = AdaptiveConfig::new(
                (clamp[0], clamp[1]),
                o.coefficients.unwrap_or(cfg.adaptive.coefficients),
                o.degenerate_eps.unwrap_or(cfg.adaptive.degenerate_eps),
            )
            .map_err(|e| BenchError::Config(format!("`overrides.{key}`: {e}")))?;
            adaptive.insert(id, merged);
        }

        let order = &cfg.order;
        let mut distinct = order.steps.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 3 || distinct[0] < 2 {
            return fail("`order.steps` needs at least 3 distinct step counts, each at least 2".into());
        }
        if order.chains == 0 {
            return fail("`order.chains` must be at least 1".into());
        }
        if order.samplers.is_empty() {
            return fail("`order.samplers` must not be empty".into());
        }
        if order
            .samplers
            .iter()
            .any(|s| matches!(s, SamplerId::Ddim | SamplerId::Rk4Oracle))
        {
            return fail("`order.samplers` may only list flow-time samplers (not ddim or rk4-oracle)".into());
        }
        for name in &order.targets {
            if !names.contains(name) {
                return fail(format!("`order.targets` names unknown target `{name}`"));
            }
        }

        Ok(Self {
            config,
            schedule,
            map,
            targets,
            adaptive,
        })
    }

    pub fn adaptive_config(&self, id: SamplerId) -> AdaptiveConfig<f64> {
        self.adaptive.get(&id).copied().unwrap_or_default()
    }

    pub fn frozen_rule(&self) -> FrozenRule {
        self.config.transform.frozen_rule
    }
}

fn first_duplicate<T: Ord + Clone>(items: &[T]) -> Option<T> {
    let mut seen = BTreeSet::new();
    items.iter().find(|x| !seen.insert((*x).clone())).cloned()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            BenchError::Config(msg) => BenchError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of a canonical JSON rendering: sorted keys, set-like lists
    /// sorted, targets ordered by name, and run-location fields dropped.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let root = value.as_object_mut().expect("config is a table");
        root.remove("output_dir");
        root.remove("workers");
        for key in ["steps", "seeds", "samplers"] {
            sort_array(root.get_mut(key));
        }
        if let Some(order) = root.get_mut("order").and_then(|o| o.as_object_mut()) {
            for key in ["steps", "samplers", "targets"] {
                sort_array(order.get_mut(key));
            }
        }
        if let Some(serde_json::Value::Array(targets)) = root.get_mut("targets") {
            targets.sort_by(|a, b| a["name"].as_str().cmp(&b["name"].as_str()));
        }
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn sort_array(value: Option<&mut serde_json::Value>) {
    if let Some(serde_json::Value::Array(items)) = value {
        items.sort_by_key(|v| v.to_string());
    }
}

/// Parse, default and check a config file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let config = ExperimentConfig::load(path)?;
    Experiment::new(config.clone())?;
    Ok(config)
}

mod str_value {
    use super::*;
    use serde::{de, Deserializer, Serializer};

    pub fn serialize<S: Serializer, T: Display>(value: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(value)
    }

    pub fn deserialize<'de, D, T>(d: D) -> std::result::Result<T, D::Error>
    where
        D: Deserializer<'de>,
        T: FromStr,
        T::Err: Display,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

mod opt_str_value {
    use super::*;
    use serde::{de, Deserializer, Serializer};

    pub fn serialize<S: Serializer, T: Display>(
        value: &Option<T>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        match value {
            Some(v) => s.collect_str(v),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D, T>(d: D) -> std::result::Result<Option<T>, D::Error>
    where
        D: Deserializer<'de>,
        T: FromStr,
        T::Err: Display,
    {
        Option::<String>::deserialize(d)?
            .map(|s| s.parse().map_err(de::Error::custom))
            .transpose()
    }
}

mod str_list {
    use super::*;
    use serde::{de, ser::SerializeSeq, Deserializer, Serializer};

    pub fn serialize<S: Serializer, T: Display>(values: &[T], s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(values.len()))?;
        for v in values {
            seq.serialize_element(&v.to_string())?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
    where
        D: Deserializer<'de>,
        T: FromStr,
        T::Err: Display,
    {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(de::Error::custom))
            .collect()
    }
}

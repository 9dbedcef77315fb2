use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use itl_core::data::TabularSchema;
use itl_core::{ExpertSpec, GridworldSpec, HmcConfig, ItlConfig, MceConfig, RandomworldSpec, TransferVariant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mle,
    Itl,
    Mce,
    Ps,
    Bitl,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mle => "mle",
            Method::Itl => "itl",
            Method::Mce => "mce",
            Method::Ps => "ps",
            Method::Bitl => "bitl",
        }
    }

    /// Produces a set of posterior samples rather than one tensor.
    pub fn is_sampler(&self) -> bool {
        matches!(self, Method::Ps | Method::Bitl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldConfig {
    Gridworld(GridworldSpec),
    Randomworld(RandomworldSpec),
    /// Discretized feature space with known rewards. Without a simulator only
    /// ingested logs can be fitted; with one, a random world of the same size
    /// stands in for the unknown dynamics.
    Schema {
        schema: TabularSchema,
        #[serde(default)]
        simulator: Option<RandomworldSpec>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Ordered sample pairs used for Bayesian regret.
    pub regret_pair_budget: usize,
    /// Tail fraction for the CVaR of value across datasets.
    pub cvar_level: f64,
    pub save_tensors: bool,
    pub save_samples: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            regret_pair_budget: 250_000,
            cvar_level: 0.1,
            save_tensors: true,
            save_samples: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub methods: Vec<Method>,
    pub world: WorldConfig,
    #[serde(default = "default_coverage")]
    pub coverage: Vec<f64>,
    #[serde(default = "one")]
    pub n_datasets: usize,
    /// Next-state draws per (state, ε-ball action).
    #[serde(default = "default_k")]
    pub k: usize,
    /// Dirichlet smoothing; the schema's value or 0.001 when unset.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub expert: ExpertSpec,
    /// Reward table for the transfer task; each world has a default.
    #[serde(default)]
    pub transfer: Option<TransferVariant>,
    /// Logged transitions (`s,a,s_next`) used by fit, sample and tune-epsilon
    /// instead of generated data.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub validation_data: Option<PathBuf>,
    #[serde(default)]
    pub epsilon_grid: Vec<f64>,
    #[serde(default)]
    pub itl: ItlConfig,
    #[serde(default)]
    pub hmc: HmcConfig,
    #[serde(default)]
    pub mce: MceConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "one")]
    pub workers: usize,
}

fn default_coverage() -> Vec<f64> {
    vec![1.0]
}

fn one() -> usize {
    1
}

fn default_k() -> usize {
    10
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).context("invalid config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("loading {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("at least one method is required");
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                bail!("method {m} listed twice");
            }
        }
        if self.coverage.is_empty() {
            bail!("coverage grid is empty");
        }
        if let Some(c) = self.coverage.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
            bail!("coverage {c} outside (0, 1]");
        }
        if self.n_datasets == 0 || self.k == 0 || self.workers == 0 {
            bail!("n_datasets, k and workers must be at least 1");
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                bail!("delta must be positive");
            }
        }
        if self.epsilon_grid.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            bail!("epsilon grid values must be finite and nonnegative");
        }
        let level = self.evaluation.cvar_level;
        if !(level > 0.0 && level <= 1.0) {
            bail!("cvar_level {level} outside (0, 1]");
        }
        if self.methods.iter().any(Method::is_sampler) && self.hmc.n_samples < 2 {
            bail!("sampling methods need hmc.n_samples of at least 2");
        }
        self.itl.validate()?;
        self.mce.validate()?;
        Ok(())
    }

    /// SHA-256 of the settings that determine results. The output directory
    /// and worker count are excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        canonical.workers = 1;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

//! TOML experiment configuration.
//!
//! Every key is optional; missing keys take the Monte Carlo design. Example:
//!
//! ```toml
//! sample_sizes = [500, 1000]
//! replications = 20
//! seed = 11
//! start = "least-squares"
//!
//! [fit]
//! tol = 1e-6
//!
//! [[functionals]]
//! name = "v111"
//! path = [1, 1, 1]
//! discount = 0.95
//! ```
//!
//! Choice paths in the file are one-based, like the CSV format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::FitConfig;
use crate::functionals::WeightedSumSpec;
use crate::simulate::DgpConfig;

/// Where each replication's optimizer starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StartRule {
    /// At the data-generating values.
    Truth,
    #[default]
    LeastSquares,
}

/// A weighted sum of potential outcomes tracked across replications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSpec {
    pub name: String,
    /// One-based alternatives.
    pub path: Vec<usize>,
    #[serde(default)]
    pub discount: Option<f64>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl FunctionalSpec {
    pub fn to_spec(&self) -> Result<WeightedSumSpec> {
        if self.path.contains(&0) {
            return Err(Error::Config(format!("functional {}: choice paths are one-based", self.name)));
        }
        let path: Vec<usize> = self.path.iter().map(|d| d - 1).collect();
        match (&self.weights, self.discount) {
            (Some(w), None) => Ok(WeightedSumSpec { weights: w.clone(), path }),
            (None, d) => Ok(WeightedSumSpec::discounted(path, d.unwrap_or(0.95))),
            (Some(_), Some(_)) => Err(Error::Config(format!("functional {}: give weights or a discount, not both", self.name))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub start: StartRule,
    pub functionals: Vec<FunctionalSpec>,
    /// Probabilities at which quantiles of `X*_k` are recorded.
    pub quantile_alphas: Vec<f64>,
    pub output_dir: PathBuf,
    /// Worker threads; all available cores when unset.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dgp: DgpConfig::default(),
            sample_sizes: vec![250, 500, 1000, 2000, 4000],
            replications: 200,
            seed: 0,
            fit: FitConfig::default(),
            start: StartRule::default(),
            functionals: vec![FunctionalSpec { name: "v111".into(), path: vec![1, 1, 1], discount: Some(0.95), weights: None }],
            quantile_alphas: default_alphas(),
            output_dir: PathBuf::from("out"),
            threads: None,
        }
    }
}

/// `0.05, 0.06, …, 0.95`.
pub fn default_alphas() -> Vec<f64> {
    (5..=95).map(|k| k as f64 / 100.0).collect()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(Error::Config("sample sizes must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("thread budget must be at least 1".into()));
        }
        if self.quantile_alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config("quantile probabilities must lie in (0, 1)".into()));
        }
        self.dgp.validate()?;
        self.fit.validate()?;
        for f in &self.functionals {
            f.to_spec()?.validate(&self.dgp.outcome)?;
        }
        Ok(())
    }
}

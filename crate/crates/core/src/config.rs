//! Run configuration read from JSON or TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintSpec;
use crate::error::{Error, Result};
use crate::mcmc::McmcConfig;
use crate::smc::{KSchedule, SmcConfig, Truncation};

/// Every knob of a sampling run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Registered sampler name: `smc` or `merge-split`.
    pub sampler: String,
    /// Registered tree sampler; defaults to `hierarchical` when `levels` is
    /// non-empty and `wilson` otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree_sampler: Option<String>,
    pub seed: u64,
    pub particles: usize,
    pub districts: usize,
    pub pop_tol: f64,
    pub rho: f64,
    pub alpha: f64,
    pub k: KSchedule,
    pub truncation: Truncation,
    pub final_resample: bool,
    /// See [`SmcConfig::order_correction`].
    pub order_correction: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Administrative level names, coarsest first.
    pub levels: Vec<String>,
    pub constraint: ConstraintSpec,
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub chains: usize,
    /// Eligible cut edges for merge-split; all tree edges when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcmc_k: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let smc = SmcConfig::default();
        let mcmc = McmcConfig::default();
        RunConfig {
            sampler: "smc".into(),
            tree_sampler: None,
            seed: smc.seed,
            particles: smc.particles,
            districts: smc.districts,
            pop_tol: smc.pop_tol,
            rho: smc.rho,
            alpha: smc.alpha,
            k: smc.k,
            truncation: smc.truncation,
            final_resample: smc.final_resample,
            order_correction: smc.order_correction,
            threads: None,
            levels: Vec::new(),
            constraint: ConstraintSpec::default(),
            iterations: mcmc.iterations,
            burn_in: mcmc.burn_in,
            thin: mcmc.thin,
            chains: mcmc.chains,
            mcmc_k: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<RunConfig> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `.toml` files as TOML and anything else as JSON.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text),
            _ => Self::from_json_str(&text),
        }
    }

    pub fn smc(&self) -> SmcConfig {
        SmcConfig {
            particles: self.particles,
            districts: self.districts,
            pop_tol: self.pop_tol,
            rho: self.rho,
            alpha: self.alpha,
            k: self.k.clone(),
            truncation: self.truncation,
            final_resample: self.final_resample,
            seed: self.seed,
            threads: self.threads,
            order_correction: self.order_correction,
        }
    }

    pub fn mcmc(&self) -> McmcConfig {
        McmcConfig {
            districts: self.districts,
            pop_tol: self.pop_tol,
            rho: self.rho,
            k: self.mcmc_k,
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            chains: self.chains,
            seed: self.seed,
        }
    }

    pub fn tree_sampler_name(&self) -> &str {
        match &self.tree_sampler {
            Some(name) => name,
            None if self.levels.is_empty() => "wilson",
            None => "hierarchical",
        }
    }
}

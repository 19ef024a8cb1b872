//! Plan samplers selectable by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::json;

use crate::config::RunConfig;
use crate::constraint::Constraint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Plan};
use crate::mcmc::run_chains;
use crate::smc::run_smc;
use crate::ust::TreeSampler;

/// Per-plan provenance written next to each plan.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanOrigin {
    Particle { stage_log_weights: Vec<f64> },
    Chain { chain: usize, iteration: u64 },
}

/// Output of any sampler: plans with log importance weights.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub sampler: String,
    pub plans: Vec<Plan>,
    pub log_weights: Vec<f64>,
    pub origins: Vec<PlanOrigin>,
    /// Sampler-specific run statistics.
    pub diagnostics: serde_json::Value,
}

pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;

    fn run(
        &self,
        graph: &Graph,
        config: &RunConfig,
        constraint: &Constraint,
        trees: &dyn TreeSampler,
    ) -> Result<SampleRun>;
}

pub struct Smc;

impl Sampler for Smc {
    fn name(&self) -> &'static str {
        "smc"
    }

    fn run(
        &self,
        graph: &Graph,
        config: &RunConfig,
        constraint: &Constraint,
        trees: &dyn TreeSampler,
    ) -> Result<SampleRun> {
        let ens = run_smc(graph, &config.smc(), constraint, trees)?;
        let diagnostics = json!({
            "stages": ens.diagnostics,
            "ess": ens.ess(),
            "resampled": ens.resampled,
        });
        Ok(SampleRun {
            sampler: self.name().into(),
            origins: ens
                .log_stage_weights
                .into_iter()
                .map(|w| PlanOrigin::Particle {
                    stage_log_weights: w,
                })
                .collect(),
            plans: ens.plans,
            log_weights: ens.log_weights,
            diagnostics,
        })
    }
}

pub struct MergeSplit;

impl Sampler for MergeSplit {
    fn name(&self) -> &'static str {
        "merge-split"
    }

    fn run(
        &self,
        graph: &Graph,
        config: &RunConfig,
        constraint: &Constraint,
        trees: &dyn TreeSampler,
    ) -> Result<SampleRun> {
        let chains = run_chains(graph, &config.mcmc(), constraint, trees)?;
        let diagnostics = json!({
            "acceptance_rates": chains.iter().map(|c| c.acceptance_rate).collect::<Vec<_>>(),
        });
        let mut run = SampleRun {
            sampler: self.name().into(),
            plans: Vec::new(),
            log_weights: Vec::new(),
            origins: Vec::new(),
            diagnostics,
        };
        for (c, out) in chains.into_iter().enumerate() {
            for (plan, it) in out.plans.into_iter().zip(out.iterations) {
                run.plans.push(plan);
                run.log_weights.push(0.0);
                run.origins.push(PlanOrigin::Chain {
                    chain: c,
                    iteration: it,
                });
            }
        }
        Ok(run)
    }
}

#[derive(Clone)]
pub struct SamplerRegistry {
    samplers: BTreeMap<String, Arc<dyn Sampler>>,
}

impl SamplerRegistry {
    pub fn empty() -> Self {
        SamplerRegistry {
            samplers: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, sampler: Arc<dyn Sampler>) {
        self.samplers.insert(sampler.name().to_string(), sampler);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.samplers.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Sampler>> {
        self.samplers
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "sampler",
                name: name.to_string(),
                available: self.names().collect::<Vec<_>>().join(", "),
            })
    }
}

/// Registry holding `smc` and `merge-split`.
pub fn registry() -> SamplerRegistry {
    let mut r = SamplerRegistry::empty();
    r.register(Arc::new(Smc));
    r.register(Arc::new(MergeSplit));
    r
}

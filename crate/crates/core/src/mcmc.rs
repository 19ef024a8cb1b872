//! Merge-split Markov chain with the same stationary distribution as the
//! SMC target.
//!
//! A step picks an adjacent district pair uniformly, merges it, draws a
//! spanning tree of the merged region and cuts one of its edges. For an
//! unordered split `(A, B)` of the merged region `M` the proposal
//! probability is `tau(A) tau(B) |C(A, B)| / (tau(M) k)` where `C` is the
//! set of edges joining `A` and `B`, so the Metropolis-Hastings log ratio is
//!
//! ```text
//! J - J' + (rho - 1) [log tau(A') + log tau(B') - log tau(A) - log tau(B)]
//!        + log |C(A, B)| - log |C(A', B')| + log adj(plan) - log adj(plan')
//! ```
//!
//! with `adj` the number of adjacent district pairs. With `k` covering all
//! tree edges this is exact; a smaller `k` relies on every admissible edge
//! being among the `k` best.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::Constraint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Plan, Subgraph};
use crate::metrics::within_tolerance;
use crate::rng::{RngStream, StreamRng};
use crate::smc::{run_smc, KSchedule, SmcConfig, Truncation};
use crate::splitter::{crossing_edges, split_tree, SplitParams, Tolerance};
use crate::ust::TreeSampler;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub districts: usize,
    pub pop_tol: f64,
    pub rho: f64,
    /// Eligible edges per cut; `None` means every tree edge.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub chains: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            districts: 2,
            pop_tol: 0.05,
            rho: 1.0,
            k: None,
            iterations: 20_000,
            burn_in: 10_000,
            thin: 1,
            chains: 1,
            seed: 1,
        }
    }
}

/// Parameters of a single step.
#[derive(Debug, Clone, Copy)]
pub struct StepParams {
    pub tolerance: Tolerance,
    pub rho: f64,
    pub k: Option<usize>,
}

/// Current plan with cached target components.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub plan: Plan,
    /// `log tau` per district (zeros when `rho = 1`).
    pub log_taus: Vec<f64>,
    pub j: f64,
    pub adjacent_pairs: usize,
    pub iteration: u64,
    pub accepted: u64,
}

impl ChainState {
    pub fn new(
        graph: &Graph,
        plan: Plan,
        params: &StepParams,
        constraint: &Constraint,
        trees: &dyn TreeSampler,
    ) -> Result<ChainState> {
        if plan.assignment().len() != graph.node_count() {
            return Err(Error::InvalidPlan("plan does not cover the graph".into()));
        }
        if plan.districts_count() < 2 {
            return Err(Error::InvalidPlan("merge-split needs at least two districts".into()));
        }
        if !plan.is_connected(graph) {
            return Err(Error::InvalidPlan("initial plan has a disconnected district".into()));
        }
        if !within_tolerance(graph, &plan, params.tolerance) {
            return Err(Error::InvalidPlan(
                "initial plan violates the population tolerance".into(),
            ));
        }
        let j = constraint.total(graph, &plan);
        if j == f64::INFINITY {
            return Err(Error::InvalidPlan("initial plan violates a hard constraint".into()));
        }
        let log_taus = district_log_taus(graph, &plan, params.rho, trees);
        Ok(ChainState {
            adjacent_pairs: plan.adjacent_pairs(graph).len(),
            plan,
            log_taus,
            j,
            iteration: 0,
            accepted: 0,
        })
    }

    /// Recomputes the caches from scratch and compares.
    pub fn verify(
        &self,
        graph: &Graph,
        params: &StepParams,
        constraint: &Constraint,
        trees: &dyn TreeSampler,
    ) -> bool {
        let fresh = district_log_taus(graph, &self.plan, params.rho, trees);
        fresh
            .iter()
            .zip(&self.log_taus)
            .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0))
            && (constraint.total(graph, &self.plan) - self.j).abs() <= 1e-9 * self.j.abs().max(1.0)
            && self.plan.adjacent_pairs(graph).len() == self.adjacent_pairs
            && self.plan.is_connected(graph)
            && within_tolerance(graph, &self.plan, params.tolerance)
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.iteration == 0 {
            0.0
        } else {
            self.accepted as f64 / self.iteration as f64
        }
    }
}

fn district_log_taus(graph: &Graph, plan: &Plan, rho: f64, trees: &dyn TreeSampler) -> Vec<f64> {
    if rho == 1.0 {
        return vec![0.0; plan.districts_count()];
    }
    plan.districts()
        .into_iter()
        .map(|d| trees.log_count(&Subgraph::new(graph, d)))
        .collect()
}

/// One merge-split proposal and accept/reject. Returns whether the move was
/// accepted.
pub fn merge_split_step(
    state: &mut ChainState,
    graph: &Graph,
    params: &StepParams,
    constraint: &Constraint,
    trees: &dyn TreeSampler,
    rng: &mut StreamRng,
) -> Result<bool> {
    state.iteration += 1;
    let pairs = state.plan.adjacent_pairs(graph);
    if pairs.is_empty() {
        return Err(Error::InvalidPlan("no adjacent district pair".into()));
    }
    let (a, b) = pairs[rng.random_range(0..pairs.len())];
    let districts = state.plan.districts();
    let (old_a, old_b) = (&districts[a as usize], &districts[b as usize]);
    let mut merged: Vec<usize> = old_a.iter().chain(old_b).copied().collect();
    merged.sort_unstable();
    let sub = Subgraph::new(graph, merged);
    let tree = trees.sample(&sub, rng)?;
    let n = state.plan.districts_count();
    let split = SplitParams {
        n,
        tolerance: params.tolerance,
        k: params.k.unwrap_or(usize::MAX),
        stage: n - 1,
        total_pop: graph.total_pop(),
    };
    let out = split_tree(&sub, &tree, &split, rng);
    if !out.accepted {
        return Ok(false);
    }
    // the part holding the merged region's smallest node keeps the smaller label
    let (first, second) = if out.district.first() < out.remainder.first() {
        (out.district, out.remainder)
    } else {
        (out.remainder, out.district)
    };
    let mut assignment = state.plan.assignment().to_vec();
    for &v in &first {
        assignment[v] = a;
    }
    for &v in &second {
        assignment[v] = b;
    }
    let proposal = Plan::new(assignment, n as u32)?;
    let j_new = constraint.total(graph, &proposal);
    if j_new == f64::INFINITY {
        return Ok(false);
    }
    let (tau_first, tau_second) = if params.rho == 1.0 {
        (0.0, 0.0)
    } else {
        (
            trees.log_count(&Subgraph::new(graph, first.clone())),
            trees.log_count(&Subgraph::new(graph, second.clone())),
        )
    };
    let old_link = trees.linking_edges(
        graph,
        &crossing_edges(graph, old_a, &Subgraph::new(graph, old_b.clone())),
    );
    let new_link = trees.linking_edges(
        graph,
        &crossing_edges(graph, &first, &Subgraph::new(graph, second)),
    );
    let new_pairs = proposal.adjacent_pairs(graph).len();
    let tau_term = if params.rho == 1.0 {
        0.0
    } else {
        (params.rho - 1.0)
            * (tau_first + tau_second - state.log_taus[a as usize] - state.log_taus[b as usize])
    };
    let log_ratio = state.j - j_new
        + tau_term
        + (old_link as f64).ln()
        - (new_link as f64).ln()
        + (state.adjacent_pairs as f64).ln()
        - (new_pairs as f64).ln();
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        state.plan = proposal;
        state.log_taus[a as usize] = tau_first;
        state.log_taus[b as usize] = tau_second;
        state.j = j_new;
        state.adjacent_pairs = new_pairs;
        state.accepted += 1;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Post-burn-in sample of one chain.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub plans: Vec<Plan>,
    /// Iteration number of each kept plan.
    pub iterations: Vec<u64>,
    pub acceptance_rate: f64,
}

/// Runs `iterations` steps and keeps every `thin`-th plan after `burn_in`.
#[allow(clippy::too_many_arguments)]
pub fn run_chain(
    graph: &Graph,
    initial: Plan,
    iterations: u64,
    burn_in: u64,
    thin: u64,
    params: &StepParams,
    constraint: &Constraint,
    trees: &dyn TreeSampler,
    rng: &mut StreamRng,
) -> Result<ChainOutput> {
    if thin == 0 {
        return Err(Error::InvalidParameter("thin must be positive".into()));
    }
    let mut state = ChainState::new(graph, initial, params, constraint, trees)?;
    let mut plans = Vec::new();
    let mut kept = Vec::new();
    for t in 1..=iterations {
        merge_split_step(&mut state, graph, params, constraint, trees, rng)?;
        if t > burn_in && (t - burn_in) % thin == 0 {
            plans.push(state.plan.canonical());
            kept.push(t);
        }
    }
    Ok(ChainOutput {
        plans,
        iterations: kept,
        acceptance_rate: state.acceptance_rate(),
    })
}

/// A valid starting plan drawn by a one-particle SMC pass.
pub fn initial_plan(
    graph: &Graph,
    districts: usize,
    pop_tol: f64,
    constraint: &Constraint,
    trees: &dyn TreeSampler,
    seed: u64,
) -> Result<Plan> {
    let mut last_err = None;
    for attempt in 0..100u64 {
        let config = SmcConfig {
            particles: 1,
            districts,
            pop_tol,
            rho: 1.0,
            alpha: 0.0,
            k: KSchedule::Fixed(vec![graph.node_count()]),
            truncation: Truncation::None,
            final_resample: false,
            order_correction: false,
            seed: RngStream::new(seed).substream(&[u64::MAX, attempt]).rng().random(),
            threads: Some(1),
        };
        match run_smc(graph, &config, constraint, trees) {
            Ok(ens) if ens.raw_log_weights[0].is_finite() => return Ok(ens.plans[0].clone()),
            Ok(_) => {}
            Err(Error::EmptySupport(_)) => {}
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        Error::EmptySupport("no starting plan satisfies the hard constraints".into())
    }))
}

/// Runs `config.chains` independent chains, each started from its own SMC
/// draw. Chain `c` uses the random stream `(seed, c)`.
pub fn run_chains(
    graph: &Graph,
    config: &McmcConfig,
    constraint: &Constraint,
    trees: &dyn TreeSampler,
) -> Result<Vec<ChainOutput>> {
    if config.chains == 0 {
        return Err(Error::InvalidParameter("need at least one chain".into()));
    }
    if config.districts < 2 {
        return Err(Error::InvalidParameter("merge-split needs at least two districts".into()));
    }
    if matches!(config.k, Some(0)) {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let params = StepParams {
        tolerance: Tolerance::from_f64(config.pop_tol)?,
        rho: config.rho,
        k: config.k,
    };
    let root = RngStream::new(config.seed);
    (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let stream = root.child(c as u64);
            let start = initial_plan(
                graph,
                config.districts,
                config.pop_tol,
                constraint,
                trees,
                stream.child(0).rng().random(),
            )?;
            run_chain(
                graph,
                start,
                config.iterations,
                config.burn_in,
                config.thin,
                &params,
                constraint,
                trees,
                &mut stream.child(1).rng(),
            )
        })
        .collect()
}

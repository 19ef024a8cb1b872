//! Sequential Monte Carlo over district-by-district splits.
//!
//! Each stage draws an ancestor particle, splits one district off its
//! remainder and keeps the first `S` accepted attempts. Attempt `t` of
//! stage `i` runs on its own random stream `(seed, i, t)`, and attempts are
//! kept in `t` order, so results do not depend on the number of threads.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::Constraint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Plan, Subgraph};
use crate::metrics::{ess_importance, log_sum_exp};
use crate::rng::{RngStream, StreamRng};
use crate::splitter::{
    crossing_edges, edge_deviations, ok_count, split_district, PopulationBounds, SplitParams,
    Tolerance,
};
use crate::ust::TreeSampler;

/// How many lowest-deviation edges are eligible at each stage.
#[derive(Debug, Clone, PartialEq)]
pub enum KSchedule {
    /// One value for every stage, or one value per stage.
    Fixed(Vec<usize>),
    /// Estimated per stage from `n_trees` trees (default `max(20, ceil(sqrt S))`).
    Auto {
        threshold: f64,
        n_trees: Option<usize>,
    },
}

impl Default for KSchedule {
    fn default() -> Self {
        KSchedule::Auto {
            threshold: 0.95,
            n_trees: None,
        }
    }
}

impl KSchedule {
    fn validate(&self, n: usize) -> Result<()> {
        match self {
            KSchedule::Fixed(ks) => {
                if ks.is_empty() || ks.contains(&0) {
                    return Err(Error::InvalidParameter("k values must be positive".into()));
                }
                if ks.len() != 1 && ks.len() != n - 1 {
                    return Err(Error::InvalidParameter(format!(
                        "k schedule has {} entries; need 1 or {}",
                        ks.len(),
                        n - 1
                    )));
                }
            }
            KSchedule::Auto { threshold, n_trees } => {
                if !(*threshold > 0.0 && *threshold < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "k threshold must lie in (0, 1), got {threshold}"
                    )));
                }
                if matches!(n_trees, Some(t) if *t < 2) {
                    return Err(Error::InvalidParameter("k selection needs at least 2 trees".into()));
                }
            }
        }
        Ok(())
    }
}

impl FromStr for KSchedule {
    type Err = Error;

    /// `auto`, `auto(0.9)`, `auto(0.9,50)`, `5` or `4,3,2`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("cannot read k schedule `{s}`"));
        if let Some(rest) = s.strip_prefix("auto") {
            let rest = rest.trim();
            if rest.is_empty() {
                return Ok(KSchedule::default());
            }
            let inner = rest
                .strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(bad)?;
            let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
            let threshold = parts[0].parse().map_err(|_| bad())?;
            let n_trees = match parts.get(1) {
                Some(p) => Some(p.parse().map_err(|_| bad())?),
                None => None,
            };
            if parts.len() > 2 {
                return Err(bad());
            }
            return Ok(KSchedule::Auto { threshold, n_trees });
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()
            .map(KSchedule::Fixed)
    }
}

impl fmt::Display for KSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSchedule::Fixed(ks) => {
                let parts: Vec<String> = ks.iter().map(|k| k.to_string()).collect();
                write!(f, "{}", parts.join(","))
            }
            KSchedule::Auto {
                threshold,
                n_trees: None,
            } => write!(f, "auto({threshold})"),
            KSchedule::Auto {
                threshold,
                n_trees: Some(t),
            } => write!(f, "auto({threshold},{t})"),
        }
    }
}

impl Serialize for KSchedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(usize),
            List(Vec<usize>),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::One(k) => Ok(KSchedule::Fixed(vec![k])),
            Raw::List(ks) => Ok(KSchedule::Fixed(ks)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Cap applied to final weights after normalizing them to mean 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    None,
    Value(f64),
    /// `S^exponent / divisor`.
    Rule { exponent: f64, divisor: f64 },
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::Rule {
            exponent: 0.4,
            divisor: 100.0,
        }
    }
}

impl Truncation {
    pub fn w_max(&self, particles: usize) -> Option<f64> {
        match *self {
            Truncation::None => None,
            Truncation::Value(w) => Some(w),
            Truncation::Rule { exponent, divisor } => Some((particles as f64).powf(exponent) / divisor),
        }
    }
}

impl FromStr for Truncation {
    type Err = Error;

    /// `none`, a number, or `S^a/c`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || Error::Config(format!("cannot read truncation rule `{s}`"));
        if t.eq_ignore_ascii_case("none") {
            return Ok(Truncation::None);
        }
        let rule = if let Some(rest) = t.strip_prefix("S^") {
            let (a, c) = rest.split_once('/').ok_or_else(bad)?;
            Truncation::Rule {
                exponent: a.trim().parse().map_err(|_| bad())?,
                divisor: c.trim().parse().map_err(|_| bad())?,
            }
        } else {
            Truncation::Value(t.parse().map_err(|_| bad())?)
        };
        match rule {
            Truncation::Value(w) if !(w > 0.0) => Err(bad()),
            Truncation::Rule { divisor, .. } if !(divisor > 0.0) => Err(bad()),
            r => Ok(r),
        }
    }
}

impl fmt::Display for Truncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Truncation::None => write!(f, "none"),
            Truncation::Value(w) => write!(f, "{w}"),
            Truncation::Rule { exponent, divisor } => write!(f, "S^{exponent}/{divisor}"),
        }
    }
}

impl Serialize for Truncation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Truncation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(w) => Ok(Truncation::Value(w)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcConfig {
    pub particles: usize,
    pub districts: usize,
    pub pop_tol: f64,
    pub rho: f64,
    pub alpha: f64,
    pub k: KSchedule,
    pub truncation: Truncation,
    /// Draw `S` plans with replacement from the final weights.
    pub final_resample: bool,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool. Output is the same either way.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Divide each final weight by the number of district orders that
    /// produce the plan, so weights target unlabeled plans. Only matters
    /// for three or more districts.
    pub order_correction: bool,
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig {
            particles: 1000,
            districts: 2,
            pop_tol: 0.05,
            rho: 1.0,
            alpha: 0.5,
            k: KSchedule::default(),
            truncation: Truncation::default(),
            final_resample: false,
            seed: 1,
            threads: None,
            order_correction: true,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self, graph: &Graph) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::InvalidParameter("need at least one particle".into()));
        }
        if self.districts < 2 {
            return Err(Error::InvalidParameter("need at least two districts".into()));
        }
        if self.districts > graph.node_count() {
            return Err(Error::InvalidParameter(format!(
                "{} districts requested for {} nodes",
                self.districts,
                graph.node_count()
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "rho must be finite and non-negative, got {}",
                self.rho
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidParameter("threads must be positive".into()));
        }
        Tolerance::from_f64(self.pop_tol)?;
        self.k.validate(self.districts)?;
        if !graph.is_connected() {
            return Err(Error::Disconnected);
        }
        Ok(())
    }

    pub fn tolerance(&self) -> Result<Tolerance> {
        Tolerance::from_f64(self.pop_tol)
    }
}

/// Draws indices with probability proportional to `exp(log_weights)`.
#[derive(Debug, Clone)]
pub struct Categorical {
    cumulative: Vec<f64>,
}

impl Categorical {
    pub fn from_log_weights(log_weights: &[f64]) -> Option<Categorical> {
        let z = log_sum_exp(log_weights);
        if !z.is_finite() {
            return None;
        }
        let mut acc = 0.0;
        let cumulative = log_weights
            .iter()
            .map(|w| {
                acc += (w - z).exp();
                acc
            })
            .collect();
        Some(Categorical { cumulative })
    }

    pub fn uniform(count: usize) -> Categorical {
        Categorical {
            cumulative: (1..=count).map(|i| i as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.cumulative.len() == 1 {
            return 0;
        }
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

/// Ancestor distribution `exp(alpha * log w)`; `alpha = 0` is uniform.
pub fn resample_stage(log_weights: &[f64], alpha: f64, stage: usize) -> Result<Categorical> {
    if log_weights.is_empty() {
        return Err(Error::DegenerateWeights(stage));
    }
    if alpha == 0.0 {
        return Ok(Categorical::uniform(log_weights.len()));
    }
    let tempered: Vec<f64> = log_weights.iter().map(|w| alpha * w).collect();
    Categorical::from_log_weights(&tempered).ok_or(Error::DegenerateWeights(stage))
}

/// `(rho - 1) log tau(district) + log k - log |C| - J'(district)`; the tree
/// term is skipped when `rho = 1`.
pub fn incremental_log_weight(log_tau_district: f64, k: usize, linking: u64, rho: f64) -> f64 {
    assert!(linking > 0, "a tree cut always has at least one linking edge");
    let tau = if rho == 1.0 {
        0.0
    } else {
        (rho - 1.0) * log_tau_district
    };
    tau + (k as f64).ln() - (linking as f64).ln()
}

/// `-J + (1 - alpha) sum log w_i + (rho - 1) log tau(last district)`.
/// `j` holds everything not already charged at the stages.
pub fn final_log_weight(
    j: f64,
    stage_log_weights: &[f64],
    alpha: f64,
    rho: f64,
    log_tau_last: f64,
) -> f64 {
    if j == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    let stages: f64 = stage_log_weights.iter().sum();
    let tau = if rho == 1.0 {
        0.0
    } else {
        (rho - 1.0) * log_tau_last
    };
    let carried = if alpha == 1.0 { 0.0 } else { (1.0 - alpha) * stages };
    -j + carried + tau
}

/// Normalizes to mean 1 and caps at `w_max`, in log space.
pub fn truncate_weights(log_weights: &[f64], w_max: Option<f64>) -> Vec<f64> {
    let Some(w_max) = w_max else {
        return log_weights.to_vec();
    };
    let z = log_sum_exp(log_weights);
    if !z.is_finite() {
        return log_weights.to_vec();
    }
    let log_mean = z - (log_weights.len() as f64).ln();
    let cap = w_max.ln();
    log_weights
        .iter()
        .map(|&w| (w - log_mean).min(cap))
        .collect()
}

/// Result of k selection at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k: usize,
    /// Edges with deviation within tolerance, per sampled tree.
    pub ok_counts: Vec<usize>,
    /// Largest of `ok_counts`.
    pub k_hat: usize,
}

/// Smallest `k` such that, averaged over ordered pairs of sampled trees
/// `(t, s)`, the share of `t`'s `k` best edges scoring no worse than the
/// `k`-th best edge of `s` reaches `threshold`.
#[allow(clippy::too_many_arguments)]
pub fn select_k(
    sub: &Subgraph,
    total_pop: u64,
    n: usize,
    tol: Tolerance,
    threshold: f64,
    n_trees: usize,
    trees: &dyn TreeSampler,
    rng: &mut StreamRng,
) -> Result<KSelection> {
    if n_trees < 2 {
        return Err(Error::InvalidParameter("k selection needs at least 2 trees".into()));
    }
    if !sub.is_connected() {
        return Err(Error::Disconnected);
    }
    let mut keys: Vec<Vec<u128>> = Vec::with_capacity(n_trees);
    let mut ok_counts = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let tree = trees.sample(sub, rng)?;
        let devs = edge_deviations(&tree, total_pop, n);
        ok_counts.push(ok_count(&devs, total_pop, tol));
        keys.push(devs.iter().map(|d| d.key).collect());
    }
    let k_hat = ok_counts.iter().copied().max().unwrap_or(0);
    let max_len = keys.iter().map(Vec::len).max().unwrap_or(0);
    let pairs = (n_trees * (n_trees - 1)) as f64;
    for k in 1..=max_len {
        let mut sum = 0.0;
        for (s, ds) in keys.iter().enumerate() {
            let thr = ds.get(k - 1).copied().unwrap_or(u128::MAX);
            for (t, dt) in keys.iter().enumerate() {
                if t == s {
                    continue;
                }
                let top = k.min(dt.len());
                if top == 0 {
                    sum += 1.0;
                    continue;
                }
                let hits = dt[..top].partition_point(|&d| d <= thr);
                sum += hits as f64 / top as f64;
            }
        }
        if sum / pairs >= threshold {
            return Ok(KSelection {
                k,
                ok_counts,
                k_hat,
            });
        }
    }
    Ok(KSelection {
        k: max_len.max(1),
        ok_counts,
        k_hat,
    })
}

/// Per-stage run statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub stage: usize,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_hat: Option<usize>,
    pub attempts: u64,
    pub accepted: usize,
    pub acceptance_rate: f64,
    /// Accepted splits whose tree had fewer than `k` edges.
    pub clamped: usize,
    /// Distinct ancestors among accepted particles.
    pub unique_ancestors: usize,
    /// ESS of this stage's incremental weights.
    pub stage_ess: f64,
    pub seconds: f64,
}

/// Weighted sample produced by [`run_smc`].
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    pub plans: Vec<Plan>,
    /// `S x (n - 1)` incremental log weights.
    pub log_stage_weights: Vec<Vec<f64>>,
    /// Final log weights before truncation.
    pub raw_log_weights: Vec<f64>,
    /// Final log weights after truncation (all zero after a final resample).
    pub log_weights: Vec<f64>,
    pub diagnostics: Vec<StageDiagnostics>,
    pub resampled: bool,
}

impl WeightedEnsemble {
    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn ess(&self) -> f64 {
        ess_importance(&self.log_weights)
    }
}

#[derive(Debug, Clone)]
struct Particle {
    assignment: Vec<u32>,
    remainder: Vec<usize>,
    log_w: Vec<f64>,
}

struct Accepted {
    ancestor: usize,
    district: Vec<usize>,
    remainder: Vec<usize>,
    log_w: f64,
    clamped: bool,
}

const UNASSIGNED: u32 = u32::MAX;
/// log of the number of district orders in which the splitter can produce
/// `plan`: at every step the split-off district must meet the population
/// bounds, win the orientation rule, and leave a remainder the tree family
/// spans with at least one linking edge. Zero orders gives `-inf`.
pub fn log_orderings(graph: &Graph, plan: &Plan, tol: Tolerance, trees: &dyn TreeSampler) -> f64 {
    let n = plan.districts_count();
    if n <= 2 {
        return 0.0;
    }
    assert!(n < 64, "order counting supports fewer than 64 districts");
    let districts = plan.districts();
    let pops = plan.district_pops(graph);
    let ctx = Orders {
        graph,
        districts: &districts,
        pops: &pops,
        tol,
        trees,
        spans: HashMap::new(),
        counts: HashMap::new(),
    };
    let full = (1u64 << n) - 1;
    let mut ctx = ctx;
    ctx.count(full).ln()
}

struct Orders<'a> {
    graph: &'a Graph,
    districts: &'a [Vec<usize>],
    pops: &'a [u64],
    tol: Tolerance,
    trees: &'a dyn TreeSampler,
    spans: HashMap<u64, bool>,
    counts: HashMap<u64, f64>,
}

impl Orders<'_> {
    fn nodes(&self, mask: u64) -> Vec<usize> {
        (0..self.districts.len())
            .filter(|d| mask >> d & 1 == 1)
            .flat_map(|d| self.districts[d].iter().copied())
            .collect()
    }

    fn spanned(&mut self, mask: u64) -> bool {
        if let Some(&b) = self.spans.get(&mask) {
            return b;
        }
        let b = self.trees.spans(&Subgraph::new(self.graph, self.nodes(mask)));
        self.spans.insert(mask, b);
        b
    }

    fn count(&mut self, mask: u64) -> f64 {
        let left = mask.count_ones() as usize;
        if left == 1 {
            return 1.0;
        }
        if let Some(&c) = self.counts.get(&mask) {
            return c;
        }
        let n = self.districts.len();
        let total = self.graph.total_pop();
        let region_pop: u64 = (0..n).filter(|d| mask >> d & 1 == 1).map(|d| self.pops[d]).sum();
        let smallest = (0..n)
            .filter(|d| mask >> d & 1 == 1)
            .map(|d| self.districts[d][0])
            .min()
            .unwrap();
        let bounds = PopulationBounds::new(n - left + 1, region_pop, total, n, self.tol);
        let mut c = 0.0;
        for d in (0..n).filter(|d| mask >> d & 1 == 1) {
            let rest = mask & !(1 << d);
            if !bounds.contains(self.pops[d]) {
                continue;
            }
            let mine = Tolerance::deviation_key(self.pops[d], total, n as u64);
            let theirs = Tolerance::deviation_key(region_pop - self.pops[d], total, n as u64);
            let wins = match mine.cmp(&theirs) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => self.districts[d][0] == smallest,
            };
            if !wins || !self.spanned(1 << d) || !self.spanned(rest) {
                continue;
            }
            let other = Subgraph::new(self.graph, self.nodes(rest));
            let crossing = crossing_edges(self.graph, &self.districts[d], &other);
            if self.trees.linking_edges(self.graph, &crossing) == 0 {
                continue;
            }
            c += self.count(rest);
        }
        self.counts.insert(mask, c);
        c
    }
}

const MAX_BATCH: u64 = 1 << 20;

struct Runner<'a> {
    graph: &'a Graph,
    config: &'a SmcConfig,
    constraint: &'a Constraint,
    trees: &'a dyn TreeSampler,
    tol: Tolerance,
    root: RngStream,
}

impl Runner<'_> {
    fn attempt(
        &self,
        stage: usize,
        t: u64,
        k: usize,
        ancestors: &Categorical,
        particles: &[Particle],
    ) -> Result<Option<Accepted>> {
        let mut rng = self.root.substream(&[stage as u64, t]).rng();
        let ancestor = ancestors.sample(&mut rng);
        let sub = Subgraph::new(self.graph, particles[ancestor].remainder.clone());
        let params = SplitParams {
            n: self.config.districts,
            tolerance: self.tol,
            k,
            stage,
            total_pop: self.graph.total_pop(),
        };
        let out = split_district(&sub, &params, self.trees, &mut rng)?;
        if !out.accepted {
            return Ok(None);
        }
        let rest = Subgraph::new(self.graph, out.remainder.clone());
        let linking = self
            .trees
            .linking_edges(self.graph, &crossing_edges(self.graph, &out.district, &rest));
        let log_tau = if self.config.rho == 1.0 {
            0.0
        } else {
            self.trees
                .log_count(&Subgraph::new(self.graph, out.district.clone()))
        };
        let mut log_w = incremental_log_weight(log_tau, out.k_used, linking, self.config.rho);
        if self.constraint.has_decomposable() {
            log_w -= self.constraint.district(self.graph, &out.district);
        }
        Ok(Some(Accepted {
            ancestor,
            district: out.district,
            remainder: out.remainder,
            log_w,
            clamped: out.clamped,
        }))
    }

    fn stage_k(
        &self,
        stage: usize,
        ancestors: &Categorical,
        particles: &[Particle],
    ) -> Result<(usize, Option<usize>)> {
        match &self.config.k {
            KSchedule::Fixed(ks) => Ok((*ks.get(stage - 1).unwrap_or(&ks[0]), None)),
            KSchedule::Auto { threshold, n_trees } => {
                let n_trees = n_trees.unwrap_or_else(|| {
                    20usize.max((self.config.particles as f64).sqrt().ceil() as usize)
                });
                let mut rng = self.root.substream(&[stage as u64, u64::MAX]).rng();
                let pick = ancestors.sample(&mut rng);
                let sub = Subgraph::new(self.graph, particles[pick].remainder.clone());
                let sel = select_k(
                    &sub,
                    self.graph.total_pop(),
                    self.config.districts,
                    self.tol,
                    *threshold,
                    n_trees,
                    self.trees,
                    &mut rng,
                )?;
                Ok((sel.k, Some(sel.k_hat)))
            }
        }
    }

    fn run_stage(
        &self,
        stage: usize,
        particles: &[Particle],
        ancestors: &Categorical,
    ) -> Result<(Vec<Particle>, StageDiagnostics)> {
        let started = Instant::now();
        let s = self.config.particles;
        let (k, k_hat) = self.stage_k(stage, ancestors, particles)?;
        let budget = 1000 * s as u64;
        let mut accepted: Vec<Accepted> = Vec::with_capacity(s);
        let mut next_t = 0u64;
        let mut streak = 0u64;
        let mut batch = (2 * s as u64).clamp(64, MAX_BATCH);
        while accepted.len() < s {
            let range = next_t..next_t + batch;
            let results: Vec<Option<Accepted>> = range
                .into_par_iter()
                .map(|t| self.attempt(stage, t, k, ancestors, particles))
                .collect::<Result<_>>()?;
            for r in results {
                next_t += 1;
                match r {
                    Some(a) => {
                        streak = 0;
                        accepted.push(a);
                        if accepted.len() == s {
                            break;
                        }
                    }
                    None => {
                        streak += 1;
                        if streak >= budget {
                            return Err(Error::StageStarved {
                                stage,
                                rejections: streak,
                                accepted: accepted.len(),
                                needed: s,
                            });
                        }
                    }
                }
            }
            let remaining = (s - accepted.len()) as u64;
            let rate = (accepted.len() as f64 / next_t as f64).max(1e-3);
            batch = ((remaining as f64 / rate * 1.2).ceil() as u64).clamp(64, MAX_BATCH);
        }
        let label = (stage - 1) as u32;
        let mut seen = vec![false; particles.len()];
        let mut clamped = 0;
        let mut incr = Vec::with_capacity(s);
        let next: Vec<Particle> = accepted
            .into_iter()
            .map(|a| {
                seen[a.ancestor] = true;
                clamped += a.clamped as usize;
                incr.push(a.log_w);
                let parent = &particles[a.ancestor];
                let mut assignment = parent.assignment.clone();
                for &v in &a.district {
                    assignment[v] = label;
                }
                let mut log_w = parent.log_w.clone();
                log_w.push(a.log_w);
                Particle {
                    assignment,
                    remainder: a.remainder,
                    log_w,
                }
            })
            .collect();
        if clamped > 0 {
            log::warn!("stage {stage}: k = {k} exceeded the tree size in {clamped} accepted splits");
        }
        let diag = StageDiagnostics {
            stage,
            k,
            k_hat,
            attempts: next_t,
            accepted: s,
            acceptance_rate: s as f64 / next_t as f64,
            clamped,
            unique_ancestors: seen.iter().filter(|&&b| b).count(),
            stage_ess: ess_importance(&incr),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "stage {stage}: k = {k}, acceptance {:.3}, {} distinct ancestors",
            diag.acceptance_rate,
            diag.unique_ancestors
        );
        Ok((next, diag))
    }

    fn run(&self) -> Result<WeightedEnsemble> {
        let (n, s) = (self.config.districts, self.config.particles);
        let graph = self.graph;
        let first = PopulationBounds::new(1, graph.total_pop(), graph.total_pop(), n, self.tol);
        if !first.is_feasible() {
            return Err(Error::InfeasibleBounds {
                stage: 1,
                lower: first.lower(),
                upper: first.upper(),
            });
        }
        let mut particles = vec![Particle {
            assignment: vec![UNASSIGNED; graph.node_count()],
            remainder: (0..graph.node_count()).collect(),
            log_w: Vec::new(),
        }];
        let mut diagnostics = Vec::with_capacity(n - 1);
        for stage in 1..n {
            let ancestors = if stage == 1 {
                Categorical::uniform(particles.len())
            } else {
                let last: Vec<f64> = particles.iter().map(|p| *p.log_w.last().unwrap()).collect();
                resample_stage(&last, self.config.alpha, stage)?
            };
            let (next, diag) = self.run_stage(stage, &particles, &ancestors)?;
            particles = next;
            diagnostics.push(diag);
        }

        // one more tempered draw consumes the last stage weight
        if self.config.alpha > 0.0 {
            let last: Vec<f64> = particles.iter().map(|p| *p.log_w.last().unwrap()).collect();
            let table = resample_stage(&last, self.config.alpha, n)?;
            let mut rng = self.root.substream(&[n as u64, 0]).rng();
            particles = (0..s).map(|_| particles[table.sample(&mut rng)].clone()).collect();
        }

        let last_label = (n - 1) as u32;
        let plans: Vec<Plan> = particles
            .par_iter()
            .map(|p| {
                let assignment: Vec<u32> = p
                    .assignment
                    .iter()
                    .map(|&d| if d == UNASSIGNED { last_label } else { d })
                    .collect();
                Plan::new(assignment, n as u32)
            })
            .collect::<Result<_>>()?;
        let orders: HashMap<Plan, f64> = if self.config.order_correction && n > 2 {
            let mut unique: Vec<Plan> = plans.iter().map(Plan::canonical).collect();
            unique.sort();
            unique.dedup();
            unique
                .into_par_iter()
                .map(|c| {
                    let r = log_orderings(graph, &c, self.tol, self.trees);
                    (c, r)
                })
                .collect()
        } else {
            HashMap::new()
        };
        let finished: Vec<(Plan, f64)> = particles
            .par_iter()
            .zip(plans)
            .map(|(p, plan)| {
                let mut j = self.constraint.global(graph, &plan);
                if self.constraint.has_decomposable() {
                    j += self.constraint.district(graph, &p.remainder);
                }
                let log_tau_last = if self.config.rho == 1.0 {
                    0.0
                } else {
                    self.trees.log_count(&Subgraph::new(graph, p.remainder.clone()))
                };
                let mut w = final_log_weight(j, &p.log_w, self.config.alpha, self.config.rho, log_tau_last);
                if let Some(r) = orders.get(&plan.canonical()) {
                    w -= r;
                }
                Ok((plan, w))
            })
            .collect::<Result<_>>()?;
        let log_stage_weights: Vec<Vec<f64>> = particles.into_iter().map(|p| p.log_w).collect();
        let (mut plans, raw): (Vec<Plan>, Vec<f64>) = finished.into_iter().unzip();
        if raw.iter().all(|w| *w == f64::NEG_INFINITY) {
            return Err(Error::EmptySupport(
                "every sampled plan violates a hard constraint".into(),
            ));
        }
        let w_max = self.config.truncation.w_max(s);
        if let Some(w) = w_max.filter(|&w| w < 1.0) {
            log::warn!("truncation cap {w:.3} is below the mean weight; all final weights will be equal");
        }
        let mut log_weights = truncate_weights(&raw, w_max);
        let mut stage_weights = log_stage_weights;
        let mut raw_weights = raw;
        if self.config.final_resample {
            let table = Categorical::from_log_weights(&log_weights).ok_or(Error::DegenerateWeights(n))?;
            let mut rng = self.root.substream(&[n as u64, 1]).rng();
            let picks: Vec<usize> = (0..s).map(|_| table.sample(&mut rng)).collect();
            plans = picks.iter().map(|&i| plans[i].clone()).collect();
            stage_weights = picks.iter().map(|&i| stage_weights[i].clone()).collect();
            raw_weights = picks.iter().map(|&i| raw_weights[i]).collect();
            log_weights = vec![0.0; s];
        }
        Ok(WeightedEnsemble {
            plans,
            log_stage_weights: stage_weights,
            raw_log_weights: raw_weights,
            log_weights,
            diagnostics,
            resampled: self.config.final_resample,
        })
    }
}

/// Runs the sampler. District `i` (0-based) of every plan is the one split
/// off at stage `i + 1`; the last district is the final remainder.
pub fn run_smc(
    graph: &Graph,
    config: &SmcConfig,
    constraint: &Constraint,
    trees: &dyn TreeSampler,
) -> Result<WeightedEnsemble> {
    config.validate(graph)?;
    let runner = Runner {
        graph,
        config,
        constraint,
        trees,
        tol: config.tolerance()?,
        root: RngStream::new(config.seed),
    };
    match config.threads {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(|| runner.run()),
        None => runner.run(),
    }
}

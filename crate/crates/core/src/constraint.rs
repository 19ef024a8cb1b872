//! Constraint terms `J(plan)` and their registry.
//!
//! A term either scores a whole plan, or is decomposable into a sum of
//! per-district penalties. Decomposable terms are applied at every SMC
//! stage instead of once at the end.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Labeling, Level, Plan};
use crate::metrics::{rem, spl, variation_of_information};

pub trait ConstraintTerm: Send + Sync + fmt::Debug {
    fn kind(&self) -> &'static str;

    /// Contribution to `J` for a complete plan; `f64::INFINITY` marks a
    /// violated hard constraint.
    fn evaluate(&self, graph: &Graph, plan: &Plan) -> f64;

    /// Per-district penalty `J'(district)` when the term decomposes.
    fn district_penalty(&self, _graph: &Graph, _district: &[usize]) -> Option<f64> {
        None
    }

    fn is_decomposable(&self) -> bool {
        false
    }
}

fn sum_over_districts(term: &dyn ConstraintTerm, graph: &Graph, plan: &Plan) -> f64 {
    plan.districts()
        .iter()
        .map(|d| term.district_penalty(graph, d).unwrap_or(0.0))
        .sum()
}

/// `beta / log n * VI(plan, reference)`.
#[derive(Debug, Clone)]
pub struct StatusQuo {
    pub strength: f64,
    pub reference: Plan,
}

impl ConstraintTerm for StatusQuo {
    fn kind(&self) -> &'static str {
        "status_quo"
    }

    fn evaluate(&self, graph: &Graph, plan: &Plan) -> f64 {
        let n = self.reference.districts_count();
        if n < 2 || self.strength == 0.0 {
            return 0.0;
        }
        self.strength / (n as f64).ln() * variation_of_information(graph, plan, &self.reference)
    }
}

/// `beta * spl` at one level, infinite above an optional cap.
#[derive(Debug, Clone)]
pub struct Splits {
    pub strength: f64,
    pub level: Level,
    pub max: Option<u64>,
}

impl ConstraintTerm for Splits {
    fn kind(&self) -> &'static str {
        "splits"
    }

    fn evaluate(&self, graph: &Graph, plan: &Plan) -> f64 {
        let s = spl(graph, plan, &self.level);
        match self.max {
            Some(cap) if s > cap => f64::INFINITY,
            _ if self.strength == 0.0 => 0.0,
            _ => self.strength * s as f64,
        }
    }
}

/// Hard cap on the fraction of cut edges.
#[derive(Debug, Clone)]
pub struct RemCap {
    pub max: f64,
}

impl ConstraintTerm for RemCap {
    fn kind(&self) -> &'static str {
        "rem_cap"
    }

    fn evaluate(&self, graph: &Graph, plan: &Plan) -> f64 {
        if rem(graph, plan) > self.max {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

/// `beta` per administrative unit that a district covers only partly.
#[derive(Debug, Clone)]
pub struct DistrictUnits {
    pub strength: f64,
    pub level: Level,
    unit_sizes: Vec<usize>,
}

impl DistrictUnits {
    pub fn new(strength: f64, level: Level) -> Self {
        let mut unit_sizes = vec![0; level.unit_count()];
        for &u in &level.unit_of {
            unit_sizes[u as usize] += 1;
        }
        DistrictUnits {
            strength,
            level,
            unit_sizes,
        }
    }
}

impl ConstraintTerm for DistrictUnits {
    fn kind(&self) -> &'static str {
        "district_units"
    }

    fn evaluate(&self, graph: &Graph, plan: &Plan) -> f64 {
        sum_over_districts(self, graph, plan)
    }

    fn district_penalty(&self, _graph: &Graph, district: &[usize]) -> Option<f64> {
        let mut inside: BTreeMap<u32, usize> = BTreeMap::new();
        for &v in district {
            *inside.entry(self.level.unit_of[v]).or_default() += 1;
        }
        let partial = inside
            .iter()
            .filter(|(&u, &c)| c < self.unit_sizes[u as usize])
            .count();
        Some(self.strength * partial as f64)
    }

    fn is_decomposable(&self) -> bool {
        true
    }
}

/// `beta` per incumbent beyond the first in each district. Incumbents are
/// nodes whose attribute `attr` is positive.
#[derive(Debug, Clone)]
pub struct Incumbents {
    pub strength: f64,
    pub attr: String,
}

impl ConstraintTerm for Incumbents {
    fn kind(&self) -> &'static str {
        "incumbents"
    }

    fn evaluate(&self, graph: &Graph, plan: &Plan) -> f64 {
        sum_over_districts(self, graph, plan)
    }

    fn district_penalty(&self, graph: &Graph, district: &[usize]) -> Option<f64> {
        let count = district
            .iter()
            .filter(|&&v| graph.attr(v, &self.attr).unwrap_or(0.0) > 0.0)
            .count();
        Some(self.strength * count.saturating_sub(1) as f64)
    }

    fn is_decomposable(&self) -> bool {
        true
    }
}

/// The full constraint `J`: a sum of terms.
#[derive(Debug, Clone, Default)]
pub struct Constraint {
    terms: Vec<Arc<dyn ConstraintTerm>>,
}

impl Constraint {
    pub fn none() -> Self {
        Constraint::default()
    }

    pub fn new(terms: Vec<Arc<dyn ConstraintTerm>>) -> Self {
        Constraint { terms }
    }

    pub fn with(mut self, term: impl ConstraintTerm + 'static) -> Self {
        self.terms.push(Arc::new(term));
        self
    }

    pub fn terms(&self) -> &[Arc<dyn ConstraintTerm>] {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn has_decomposable(&self) -> bool {
        self.terms.iter().any(|t| t.is_decomposable())
    }

    /// `J(plan)`.
    pub fn total(&self, graph: &Graph, plan: &Plan) -> f64 {
        self.terms.iter().map(|t| t.evaluate(graph, plan)).sum()
    }

    /// The part of `J` that does not decompose over districts.
    pub fn global(&self, graph: &Graph, plan: &Plan) -> f64 {
        self.terms
            .iter()
            .filter(|t| !t.is_decomposable())
            .map(|t| t.evaluate(graph, plan))
            .sum()
    }

    /// `J'(district)` summed over decomposable terms.
    pub fn district(&self, graph: &Graph, district: &[usize]) -> f64 {
        self.terms
            .iter()
            .filter_map(|t| t.district_penalty(graph, district))
            .sum()
    }
}

/// One configured term: `{"kind": ..., "strength": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub kind: String,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

fn default_strength() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    #[serde(default)]
    pub terms: Vec<TermSpec>,
}

impl TermSpec {
    pub fn new(kind: &str, strength: f64) -> Self {
        TermSpec {
            kind: kind.to_string(),
            strength,
            params: Default::default(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    fn str_param(&self, key: &str) -> Result<&str> {
        self.params
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| self.missing(key, "a string"))
    }

    fn f64_param(&self, key: &str) -> Result<f64> {
        self.params
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| self.missing(key, "a number"))
    }

    fn missing(&self, key: &str, what: &str) -> Error {
        Error::Config(format!(
            "constraint `{}` needs parameter `{key}` ({what})",
            self.kind
        ))
    }
}

fn level_named(graph: &Graph, name: &str) -> Result<Level> {
    let labeling = Labeling::from_graph(graph, &[name])?;
    Ok(labeling.levels()[0].clone())
}

/// Reads `{"node id": district}` with 1-based districts.
pub fn plan_from_map(graph: &Graph, map: &serde_json::Map<String, serde_json::Value>) -> Result<Plan> {
    let mut assignment = vec![u32::MAX; graph.node_count()];
    for (id, d) in map {
        let v = graph
            .index_of(id)
            .ok_or_else(|| Error::InvalidPlan(format!("unknown node `{id}`")))?;
        let d = d
            .as_u64()
            .filter(|&d| d >= 1)
            .ok_or_else(|| Error::InvalidPlan(format!("node `{id}` has a non-positive district")))?;
        assignment[v] = (d - 1) as u32;
    }
    if let Some(v) = assignment.iter().position(|&d| d == u32::MAX) {
        return Err(Error::InvalidPlan(format!("node `{}` is unassigned", graph.id(v))));
    }
    let n = assignment.iter().max().map_or(1, |&m| m + 1);
    Plan::new(assignment, n)
}

pub type TermBuilder = fn(&TermSpec, &Graph) -> Result<Arc<dyn ConstraintTerm>>;

/// Constraint kinds selectable by name.
#[derive(Clone)]
pub struct ConstraintRegistry {
    builders: BTreeMap<String, TermBuilder>,
}

impl ConstraintRegistry {
    pub fn empty() -> Self {
        ConstraintRegistry {
            builders: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, kind: &str, builder: TermBuilder) {
        self.builders.insert(kind.to_string(), builder);
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn build_term(&self, spec: &TermSpec, graph: &Graph) -> Result<Arc<dyn ConstraintTerm>> {
        if !(spec.strength >= 0.0) {
            return Err(Error::Config(format!(
                "constraint `{}` has negative strength {}",
                spec.kind, spec.strength
            )));
        }
        let builder = self
            .builders
            .get(&spec.kind)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "constraint",
                name: spec.kind.clone(),
                available: self.kinds().collect::<Vec<_>>().join(", "),
            })?;
        builder(spec, graph)
    }

    pub fn build(&self, spec: &ConstraintSpec, graph: &Graph) -> Result<Constraint> {
        spec.terms
            .iter()
            .map(|t| self.build_term(t, graph))
            .collect::<Result<Vec<_>>>()
            .map(Constraint::new)
    }
}

impl Default for ConstraintRegistry {
    fn default() -> Self {
        let mut r = ConstraintRegistry::empty();
        r.register("status_quo", |spec, graph| {
            let map = spec
                .params
                .get("plan")
                .and_then(|v| v.as_object())
                .ok_or_else(|| spec.missing("plan", "an object of node ids to districts"))?;
            Ok(Arc::new(StatusQuo {
                strength: spec.strength,
                reference: plan_from_map(graph, map)?,
            }))
        });
        r.register("splits", |spec, graph| {
            let max = match spec.params.get("max") {
                None => None,
                Some(v) => Some(v.as_u64().ok_or_else(|| spec.missing("max", "an integer"))?),
            };
            Ok(Arc::new(Splits {
                strength: spec.strength,
                level: level_named(graph, spec.str_param("level")?)?,
                max,
            }))
        });
        r.register("rem_cap", |spec, _| {
            Ok(Arc::new(RemCap {
                max: spec.f64_param("max")?,
            }))
        });
        r.register("district_units", |spec, graph| {
            Ok(Arc::new(DistrictUnits::new(
                spec.strength,
                level_named(graph, spec.str_param("level")?)?,
            )))
        });
        r.register("incumbents", |spec, _| {
            Ok(Arc::new(Incumbents {
                strength: spec.strength,
                attr: spec.str_param("attr")?.to_string(),
            }))
        });
        r
    }
}

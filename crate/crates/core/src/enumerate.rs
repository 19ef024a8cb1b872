//! Exhaustive enumeration of balanced connected partitions of small graphs.
//!
//! Districts are grown one at a time, each as a connected set containing
//! the smallest node not yet assigned, so every partition is produced once
//! and already in canonical labeling. Node sets are `u128` masks.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::Constraint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Labeling, Plan, Subgraph};
use crate::metrics::{dev, log_sum_exp, rem, spl_by_level};
use crate::splitter::Tolerance;
use crate::tree_count::{log_tau_eta_of, log_tau_plan};

pub const DEFAULT_CAP: u64 = 100_000_000;

/// One enumerated plan with cached statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePlan {
    pub plan: Plan,
    pub dev: f64,
    pub rem: f64,
    pub log_tau: f64,
    /// Splits per level; filled by [`ReferenceSet::annotate`].
    pub spl: BTreeMap<String, u64>,
    /// `log tau_eta` under the annotated labeling.
    pub log_tau_eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub districts: usize,
    pub pop_tol: f64,
    /// Sorted by canonical assignment.
    pub plans: Vec<ReferencePlan>,
}

struct Search<'a> {
    nbr: Vec<u128>,
    pops: &'a [u64],
    total: i128,
    n: i128,
    num: i128,
    den: i128,
    cap: u64,
    found: &'a AtomicU64,
    overflow: &'a AtomicBool,
}

fn bits(mut mask: u128) -> impl Iterator<Item = usize> {
    std::iter::from_fn(move || {
        if mask == 0 {
            None
        } else {
            let i = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            Some(i)
        }
    })
}

impl Search<'_> {
    fn pop(&self, mask: u128) -> u64 {
        bits(mask).map(|v| self.pops[v]).sum()
    }

    fn admits(&self, pop: u64) -> bool {
        (self.n * pop as i128 - self.total).abs() * self.den <= self.num * self.total
    }

    fn too_big(&self, pop: u64) -> bool {
        self.n * pop as i128 * self.den > self.total * (self.den + self.num)
    }

    fn neighbors(&self, mask: u128) -> u128 {
        bits(mask).fold(0, |acc, v| acc | self.nbr[v])
    }

    fn components(&self, mut rest: u128) -> Vec<u128> {
        let mut out = Vec::new();
        while rest != 0 {
            let mut comp = rest & rest.wrapping_neg();
            let mut frontier = comp;
            while frontier != 0 {
                let grown = self.neighbors(frontier) & rest & !comp;
                comp |= grown;
                frontier = grown;
            }
            rest &= !comp;
            out.push(comp);
        }
        out
    }

    /// Can `rest` be split into `r` admissible connected districts, judging
    /// only by component populations?
    fn feasible(&self, rest: u128, r: usize) -> bool {
        let (mut lo_sum, mut hi_sum) = (0i128, 0i128);
        let comps = self.components(rest);
        if comps.len() > r {
            return false;
        }
        let r_i = r as i128;
        for c in comps {
            let p = self.pop(c) as i128 * self.n * self.den;
            let low_unit = self.total * (self.den - self.num);
            let high_unit = self.total * (self.den + self.num);
            // c districts fit iff c * low_unit <= p <= c * high_unit
            let min_c = if high_unit == 0 {
                if p == 0 { 1 } else { return false }
            } else {
                ((p + high_unit - 1) / high_unit).max(1)
            };
            let max_c = if low_unit <= 0 { r_i } else { (p / low_unit).min(r_i) };
            if min_c > max_c {
                return false;
            }
            lo_sum += min_c;
            hi_sum += max_c;
        }
        lo_sum <= r_i && r_i <= hi_sum
    }

    /// Connected sets inside `avail` containing `seed`, passed to `emit`.
    fn connected_sets(&self, seed: usize, avail: u128, emit: &mut dyn FnMut(u128, u64)) {
        let start = 1u128 << seed;
        self.grow(start, start, self.pops[seed], avail, emit);
    }

    fn grow(&self, set: u128, excluded: u128, pop: u64, avail: u128, emit: &mut dyn FnMut(u128, u64)) {
        if self.overflow.load(Ordering::Relaxed) {
            return;
        }
        emit(set, pop);
        let candidates = self.neighbors(set) & avail & !set & !excluded;
        let mut excluded = excluded;
        for w in bits(candidates) {
            let p = pop + self.pops[w];
            if !self.too_big(p) {
                self.grow(set | 1 << w, excluded, p, avail, emit);
            }
            excluded |= 1 << w;
        }
    }

    fn partitions(&self, avail: u128, r: usize, prefix: &mut Vec<u128>, out: &mut Vec<Vec<u128>>) {
        if self.overflow.load(Ordering::Relaxed) {
            return;
        }
        if r == 1 {
            if self.components(avail).len() == 1 && self.admits(self.pop(avail)) {
                if self.found.fetch_add(1, Ordering::Relaxed) + 1 > self.cap {
                    self.overflow.store(true, Ordering::Relaxed);
                    return;
                }
                let mut plan = prefix.clone();
                plan.push(avail);
                out.push(plan);
            }
            return;
        }
        let seed = avail.trailing_zeros() as usize;
        let mut firsts = Vec::new();
        self.connected_sets(seed, avail, &mut |set, pop| {
            if self.admits(pop) && self.feasible(avail & !set, r - 1) {
                firsts.push(set);
            }
        });
        for set in firsts {
            prefix.push(set);
            self.partitions(avail & !set, r - 1, prefix, out);
            prefix.pop();
        }
    }
}

/// Every plan with `n` connected districts and `dev <= pop_tol`, canonically
/// labeled and sorted. `pop_tol >= n - 1` admits all connected partitions.
/// Fails once more than `cap` plans are found.
pub fn enumerate_partitions(graph: &Graph, n: usize, pop_tol: f64, cap: u64) -> Result<ReferenceSet> {
    let m = graph.node_count();
    if m > 128 {
        return Err(Error::TooManyNodes(m));
    }
    if n == 0 || n > m {
        return Err(Error::InvalidParameter(format!(
            "cannot split {m} nodes into {n} districts"
        )));
    }
    let tol = Tolerance::from_f64(pop_tol)?;
    let mut nbr = vec![0u128; m];
    for e in graph.edges() {
        nbr[e.u] |= 1 << e.v;
        nbr[e.v] |= 1 << e.u;
    }
    let found = AtomicU64::new(0);
    let overflow = AtomicBool::new(false);
    let search = Search {
        nbr,
        pops: graph.pops(),
        total: graph.total_pop() as i128,
        n: n as i128,
        num: tol.numer() as i128,
        den: tol.denom() as i128,
        cap,
        found: &found,
        overflow: &overflow,
    };
    let all: u128 = if m == 128 { u128::MAX } else { (1u128 << m) - 1 };
    let masks: Vec<Vec<u128>> = if n == 1 {
        let mut out = Vec::new();
        search.partitions(all, 1, &mut Vec::new(), &mut out);
        out
    } else {
        let mut firsts = Vec::new();
        search.connected_sets(0, all, &mut |set, pop| {
            if search.admits(pop) && search.feasible(all & !set, n - 1) {
                firsts.push(set);
            }
        });
        firsts
            .into_par_iter()
            .flat_map_iter(|first| {
                let mut out = Vec::new();
                search.partitions(all & !first, n - 1, &mut vec![first], &mut out);
                out
            })
            .collect()
    };
    if overflow.load(Ordering::Relaxed) {
        return Err(Error::CapExceeded(cap));
    }
    let mut plans: Vec<Plan> = masks
        .into_iter()
        .map(|districts| {
            let mut assignment = vec![0u32; m];
            for (d, mask) in districts.iter().enumerate() {
                for v in bits(*mask) {
                    assignment[v] = d as u32;
                }
            }
            Plan::new(assignment, n as u32)
        })
        .collect::<Result<_>>()?;
    plans.par_sort_unstable();
    let plans = plans
        .into_par_iter()
        .map(|plan| {
            Ok(ReferencePlan {
                dev: dev(graph, &plan)?,
                rem: rem(graph, &plan),
                log_tau: log_tau_plan(graph, &plan),
                spl: BTreeMap::new(),
                log_tau_eta: None,
                plan,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReferenceSet {
        districts: n,
        pop_tol,
        plans,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    districts: usize,
    pop_tol: f64,
    plans: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    assignment: BTreeMap<String, u32>,
    dev: f64,
    rem: f64,
    log_tau: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    spl: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_tau_eta: Option<f64>,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    /// Position of a plan (any labeling) in the set.
    pub fn index_of(&self, plan: &Plan) -> Option<usize> {
        let c = plan.canonical();
        self.plans.binary_search_by(|p| p.plan.cmp(&c)).ok()
    }

    /// Adds splits and `log tau_eta` under `labeling`.
    pub fn annotate(&mut self, graph: &Graph, labeling: &Labeling) {
        self.plans.par_iter_mut().for_each(|p| {
            p.spl = spl_by_level(graph, &p.plan, labeling);
            p.log_tau_eta = Some(
                p.plan
                    .districts()
                    .into_iter()
                    .map(|d| log_tau_eta_of(&Subgraph::new(graph, d), labeling.levels()))
                    .sum(),
            );
        });
    }

    /// NDJSON: one header line, then one line per plan with 1-based
    /// districts keyed by node id.
    pub fn write_ndjson<W: Write>(&self, graph: &Graph, mut w: W) -> Result<()> {
        let header = Header {
            districts: self.districts,
            pop_tol: self.pop_tol,
            plans: self.plans.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for p in &self.plans {
            let rec = Record {
                assignment: (0..graph.node_count())
                    .map(|v| (graph.id(v).to_string(), p.plan.district_of(v) + 1))
                    .collect(),
                dev: p.dev,
                rem: p.rem,
                log_tau: p.log_tau,
                spl: p.spl.clone(),
                log_tau_eta: p.log_tau_eta,
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(graph: &Graph, r: R) -> Result<ReferenceSet> {
        let mut lines = r.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Config("reference file is empty".into())),
        };
        let mut plans = Vec::with_capacity(header.plans);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)?;
            let plan = assignment_from_ids(graph, &rec.assignment, header.districts)?;
            plans.push(ReferencePlan {
                plan: plan.canonical(),
                dev: rec.dev,
                rem: rec.rem,
                log_tau: rec.log_tau,
                spl: rec.spl,
                log_tau_eta: rec.log_tau_eta,
            });
        }
        plans.sort_by(|a, b| a.plan.cmp(&b.plan));
        Ok(ReferenceSet {
            districts: header.districts,
            pop_tol: header.pop_tol,
            plans,
        })
    }
}

/// Builds a plan from `{"node id": 1-based district}`.
pub fn assignment_from_ids(graph: &Graph, map: &BTreeMap<String, u32>, n: usize) -> Result<Plan> {
    let mut assignment = vec![u32::MAX; graph.node_count()];
    for (id, &d) in map {
        let v = graph
            .index_of(id)
            .ok_or_else(|| Error::InvalidPlan(format!("unknown node `{id}`")))?;
        if d == 0 || d as usize > n {
            return Err(Error::InvalidPlan(format!("node `{id}` has district {d}")));
        }
        assignment[v] = d - 1;
    }
    if let Some(v) = assignment.iter().position(|&d| d == u32::MAX) {
        return Err(Error::InvalidPlan(format!("node `{}` is unassigned", graph.id(v))));
    }
    Plan::new(assignment, n as u32)
}

/// Target probabilities `exp(-J) tau^rho` over the set, normalized. With a
/// labeling, `tau_eta` replaces `tau` and plans with more than `n - 1`
/// splits at any level get probability zero; the set must be annotated.
pub fn reweight_reference(
    refset: &ReferenceSet,
    graph: &Graph,
    rho: f64,
    constraint: &Constraint,
    labeling: Option<&Labeling>,
) -> Result<Vec<f64>> {
    let max_spl = refset.districts.saturating_sub(1) as u64;
    let log_target: Vec<f64> = refset
        .plans
        .iter()
        .map(|p| {
            let log_tau = match labeling {
                Some(_) => {
                    if p.spl.values().any(|&s| s > max_spl) {
                        return Ok(f64::NEG_INFINITY);
                    }
                    p.log_tau_eta.ok_or_else(|| {
                        Error::InvalidParameter("reference set is not annotated with a labeling".into())
                    })?
                }
                None => p.log_tau,
            };
            let j = constraint.total(graph, &p.plan);
            Ok(if j == f64::INFINITY {
                f64::NEG_INFINITY
            } else {
                rho * log_tau - j
            })
        })
        .collect::<Result<_>>()?;
    let z = log_sum_exp(&log_target);
    if z == f64::NEG_INFINITY {
        return Err(Error::EmptySupport("no enumerated plan has positive target mass".into()));
    }
    Ok(log_target.iter().map(|l| (l - z).exp()).collect())
}

//! Splitting one district off a remainder region by cutting a spanning tree.
//!
//! Population comparisons are exact: the deviation cap `D` is a rational
//! [`Tolerance`] and every bound is compared after cross-multiplying by
//! `n * den`.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Edge, Graph, Subgraph};
use crate::rng::StreamRng;
use crate::ust::{SpanningTree, TreeEdge, TreeSampler};

/// A non-negative rational population tolerance `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tolerance {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Tolerance {
    pub fn new(num: u64, den: u64) -> Result<Tolerance> {
        if den == 0 {
            return Err(Error::InvalidParameter("tolerance denominator is zero".into()));
        }
        let g = gcd(num, den).max(1);
        Ok(Tolerance {
            num: num / g,
            den: den / g,
        })
    }

    /// Reads the shortest decimal form of `d`, so `0.1` becomes `1/10`.
    pub fn from_f64(d: f64) -> Result<Tolerance> {
        if !d.is_finite() || d < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "population tolerance must be a finite non-negative number, got {d}"
            )));
        }
        let text = format!("{d}");
        let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
        let frac = &frac[..frac.len().min(18)];
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = int
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("tolerance {d} is too large")))?;
        let frac_val: u64 = if frac.is_empty() { 0 } else { frac.parse().unwrap() };
        let num = int
            .checked_mul(den)
            .and_then(|x| x.checked_add(frac_val))
            .ok_or_else(|| Error::InvalidParameter(format!("tolerance {d} is too large")))?;
        Tolerance::new(num, den)
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn numer(&self) -> u64 {
        self.num
    }

    pub fn denom(&self) -> u64 {
        self.den
    }

    /// `|pop / (total / n) - 1| <= D`, exactly.
    pub fn admits(&self, pop: u64, total: u64, n: u64) -> bool {
        let diff = (n as i128 * pop as i128 - total as i128).unsigned_abs();
        diff * self.den as u128 <= self.num as u128 * total as u128
    }

    /// Compares `|a / ideal - 1|` against `|b / ideal - 1|`, i.e. the
    /// deviation of two populations, without division.
    pub(crate) fn deviation_key(pop: u64, total: u64, n: u64) -> u128 {
        (n as i128 * pop as i128 - total as i128).unsigned_abs()
    }
}

impl fmt::Display for Tolerance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

/// Admissible population interval `[P_i^-, P_i^+]` for the district split
/// off at stage `i`, held exactly as multiples of `1 / (n * den)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PopulationBounds {
    lower: i128,
    upper: i128,
    scale: i128,
}

impl PopulationBounds {
    /// Bounds for stage `stage` (1-based) when `remainder_pop` is left to
    /// divide among `n - stage + 1` districts.
    pub fn new(
        stage: usize,
        remainder_pop: u64,
        total_pop: u64,
        n: usize,
        tol: Tolerance,
    ) -> PopulationBounds {
        let (p, r, n_i) = (total_pop as i128, remainder_pop as i128, n as i128);
        let (num, den) = (tol.num as i128, tol.den as i128);
        let left = (n - stage) as i128;
        let lower = (p * (den - num)).max(den * n_i * r - left * p * (den + num));
        let upper = (p * (den + num)).min(den * n_i * r - left * p * (den - num));
        PopulationBounds {
            lower,
            upper,
            scale: n_i * den,
        }
    }

    pub fn contains(&self, pop: u64) -> bool {
        let x = self.scale * pop as i128;
        self.lower <= x && x <= self.upper
    }

    pub fn is_feasible(&self) -> bool {
        self.lower <= self.upper
    }

    pub fn lower(&self) -> f64 {
        self.lower as f64 / self.scale as f64
    }

    pub fn upper(&self) -> f64 {
        self.upper as f64 / self.scale as f64
    }
}

/// `[P_i^-, P_i^+]` as floating point numbers.
pub fn population_bounds(
    stage: usize,
    remainder_pop: u64,
    total_pop: u64,
    n: usize,
    tol: Tolerance,
) -> (f64, f64) {
    let b = PopulationBounds::new(stage, remainder_pop, total_pop, n, tol);
    (b.lower(), b.upper())
}

/// Deviation `d_e` of one tree edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeDeviation {
    pub edge: TreeEdge,
    /// Population of the side below the edge (the child's subtree).
    pub below_pop: u64,
    pub above_pop: u64,
    /// `min(|n * below - P|, |n * above - P|)`; orders edges exactly.
    pub key: u128,
    /// `key / P`, i.e. `min(d_e^(1), d_e^(2))`.
    pub deviation: f64,
}

/// `d_e` for every tree edge, ascending, ties broken by `(min, max)` node pair.
pub fn edge_deviations(tree: &SpanningTree, total_pop: u64, n: usize) -> Vec<EdgeDeviation> {
    let total_tree = tree.total_pop();
    let n = n as u64;
    let mut out: Vec<EdgeDeviation> = tree
        .edges()
        .map(|edge| {
            let below = tree.subtree_pop(edge.child);
            let above = total_tree - below;
            let key = Tolerance::deviation_key(below, total_pop, n)
                .min(Tolerance::deviation_key(above, total_pop, n));
            EdgeDeviation {
                edge,
                below_pop: below,
                above_pop: above,
                key,
                deviation: if total_pop == 0 {
                    0.0
                } else {
                    key as f64 / total_pop as f64
                },
            }
        })
        .collect();
    out.sort_by(|a, b| a.key.cmp(&b.key).then(a.edge.key().cmp(&b.edge.key())));
    out
}

/// Number of edges whose cut leaves a district within the tolerance, ok(T).
pub fn ok_count(devs: &[EdgeDeviation], total_pop: u64, tol: Tolerance) -> usize {
    devs.iter()
        .filter(|d| (d.key * tol.den as u128) <= tol.num as u128 * total_pop as u128)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitParams {
    /// Total number of districts.
    pub n: usize,
    pub tolerance: Tolerance,
    /// Number of lowest-deviation edges eligible for cutting.
    pub k: usize,
    /// 1-based stage index.
    pub stage: usize,
    /// Population of the whole map, pop(V).
    pub total_pop: u64,
}

impl SplitParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidParameter("need at least two districts".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if self.stage == 0 || self.stage >= self.n {
            return Err(Error::InvalidParameter(format!(
                "stage {} outside 1..={}",
                self.stage,
                self.n - 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    /// Nodes of the new district G_i (sorted).
    pub district: Vec<usize>,
    /// Nodes of the new remainder (sorted).
    pub remainder: Vec<usize>,
    /// Endpoints of the cut tree edge.
    pub cut: Option<(usize, usize)>,
    /// d_{e*}.
    pub deviation: f64,
    pub district_pop: u64,
    pub accepted: bool,
    /// k after clamping to the tree's edge count.
    pub k_used: usize,
    pub clamped: bool,
}

/// Steps (b)-(e) on a drawn tree: score edges, pick one of the `k` best
/// uniformly, orient, and test the population bounds.
pub fn split_tree(
    sub: &Subgraph,
    tree: &SpanningTree,
    params: &SplitParams,
    rng: &mut StreamRng,
) -> SplitOutcome {
    let devs = edge_deviations(tree, params.total_pop, params.n);
    if devs.is_empty() {
        return SplitOutcome {
            district: Vec::new(),
            remainder: sub.nodes().to_vec(),
            cut: None,
            deviation: f64::INFINITY,
            district_pop: 0,
            accepted: false,
            k_used: 0,
            clamped: params.k > 0,
        };
    }
    let k_used = params.k.min(devs.len());
    let clamped = params.k > devs.len();
    if clamped {
        log::debug!(
            "stage {}: k = {} exceeds the {} tree edges; clamped",
            params.stage,
            params.k,
            devs.len()
        );
    }
    let chosen = devs[rng.random_range(0..k_used)];
    let n = params.n as u64;
    let d_below = Tolerance::deviation_key(chosen.below_pop, params.total_pop, n);
    let d_above = Tolerance::deviation_key(chosen.above_pop, params.total_pop, n);
    let below = tree.subtree_nodes(chosen.edge.child);
    let below_is_district = match d_below.cmp(&d_above) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        // tie: the side holding the region's smallest node becomes the district
        std::cmp::Ordering::Equal => below.binary_search(&sub.nodes()[0]).is_ok(),
    };
    let mut in_below = vec![false; sub.len()];
    for &v in &below {
        in_below[sub.local_index(v).unwrap()] = true;
    }
    let above: Vec<usize> = sub
        .nodes()
        .iter()
        .zip(&in_below)
        .filter(|(_, &b)| !b)
        .map(|(&v, _)| v)
        .collect();
    let (district, remainder, district_pop) = if below_is_district {
        (below, above, chosen.below_pop)
    } else {
        (above, below, chosen.above_pop)
    };
    let remainder_pop = tree.total_pop();
    let bounds = PopulationBounds::new(
        params.stage,
        remainder_pop,
        params.total_pop,
        params.n,
        params.tolerance,
    );
    SplitOutcome {
        district,
        remainder,
        cut: Some((chosen.edge.child_node, chosen.edge.parent_node)),
        deviation: chosen.deviation,
        district_pop,
        accepted: bounds.contains(district_pop),
        k_used,
        clamped,
    }
}

/// Algorithm 1: draw a tree on the remainder with `sampler`, then
/// [`split_tree`].
pub fn split_district(
    sub: &Subgraph,
    params: &SplitParams,
    sampler: &dyn TreeSampler,
    rng: &mut StreamRng,
) -> Result<SplitOutcome> {
    params.validate()?;
    let tree = sampler.sample(sub, rng)?;
    Ok(split_tree(sub, &tree, params, rng))
}

/// Edges (with multiplicity) joining `a` to nodes of `b`.
pub fn crossing_edges(graph: &Graph, a: &[usize], b: &Subgraph) -> Vec<Edge> {
    let mut out = Vec::new();
    for &u in a {
        for &(w, e) in graph.neighbors(u) {
            if b.contains(w) {
                out.push(*graph.edge(e));
            }
        }
    }
    out
}

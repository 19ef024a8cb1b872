//! Plan statistics and sampler diagnostics.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Labeling, Level, Plan};
use crate::splitter::Tolerance;
use crate::tree_count::log_tau_plan;

/// Maximum population deviation `max_i |pop(V_i) / (pop(V) / n) - 1|`.
pub fn dev(graph: &Graph, plan: &Plan) -> Result<f64> {
    let pops = plan.district_pops(graph);
    let sizes = district_sizes(plan);
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidPlan(format!("district {} is empty", i + 1)));
    }
    let total = graph.total_pop();
    if total == 0 {
        return Ok(0.0);
    }
    let n = plan.districts_count() as i128;
    let worst = pops
        .iter()
        .map(|&p| (n * p as i128 - total as i128).unsigned_abs())
        .max()
        .unwrap_or(0);
    Ok(worst as f64 / total as f64)
}

/// Exact check of `dev(plan) <= tol`.
pub fn within_tolerance(graph: &Graph, plan: &Plan, tol: Tolerance) -> bool {
    let n = plan.districts_count() as u64;
    district_sizes(plan).iter().all(|&s| s > 0)
        && plan
            .district_pops(graph)
            .iter()
            .all(|&p| tol.admits(p, graph.total_pop(), n))
}

fn district_sizes(plan: &Plan) -> Vec<usize> {
    let mut sizes = vec![0usize; plan.districts_count()];
    for &d in plan.assignment() {
        sizes[d as usize] += 1;
    }
    sizes
}

/// Fraction of edges (with multiplicity) that cross district boundaries.
pub fn rem(graph: &Graph, plan: &Plan) -> f64 {
    let total = graph.edge_total();
    if total == 0 {
        return 0.0;
    }
    let cut: u64 = graph
        .edges()
        .iter()
        .filter(|e| plan.district_of(e.u) != plan.district_of(e.v))
        .map(|e| e.multiplicity as u64)
        .sum();
    cut as f64 / total as f64
}

struct DisjointSets(Vec<usize>);

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Number of connected pieces of all unit-district intersections, minus the
/// number of units.
pub fn spl(graph: &Graph, plan: &Plan, level: &Level) -> u64 {
    let m = graph.node_count();
    let mut sets = DisjointSets::new(m);
    let mut pieces = m as u64;
    for e in graph.edges() {
        if level.unit_of[e.u] == level.unit_of[e.v]
            && plan.district_of(e.u) == plan.district_of(e.v)
            && sets.union(e.u, e.v)
        {
            pieces -= 1;
        }
    }
    pieces - level.unit_count() as u64
}

/// Splits at every level of a labeling, keyed by level name.
pub fn spl_by_level(graph: &Graph, plan: &Plan, labeling: &Labeling) -> BTreeMap<String, u64> {
    labeling
        .levels()
        .iter()
        .map(|l| (l.name.clone(), spl(graph, plan, l)))
        .collect()
}

/// Population-weighted variation of information between two plans of the
/// same graph, `-sum_ij p_ij (log(p_ij / p_i) + log(p_ij / p_j))`.
pub fn variation_of_information(graph: &Graph, a: &Plan, b: &Plan) -> f64 {
    let total = graph.total_pop() as f64;
    if total == 0.0 {
        return 0.0;
    }
    let (na, nb) = (a.districts_count(), b.districts_count());
    let mut joint = vec![0u64; na * nb];
    for v in 0..graph.node_count() {
        joint[a.district_of(v) as usize * nb + b.district_of(v) as usize] += graph.pop(v);
    }
    let mut pa = vec![0u64; na];
    let mut pb = vec![0u64; nb];
    for i in 0..na {
        for j in 0..nb {
            pa[i] += joint[i * nb + j];
            pb[j] += joint[i * nb + j];
        }
    }
    let mut vi = 0.0;
    for i in 0..na {
        for j in 0..nb {
            let pij = joint[i * nb + j] as f64;
            if pij > 0.0 {
                vi -= pij / total * ((pij / pa[i] as f64).ln() + (pij / pb[j] as f64).ln());
            }
        }
    }
    vi.max(0.0)
}

/// Two-group dissimilarity index `1/2 sum_i |g_i / G - (t_i - g_i) / (T - G)|`.
/// `t_i` is the `total_attr` sum of district `i`, or its population when
/// `total_attr` is `None`.
pub fn dissimilarity_index(
    graph: &Graph,
    plan: &Plan,
    group_attr: &str,
    total_attr: Option<&str>,
) -> Result<f64> {
    let n = plan.districts_count();
    let mut g = vec![0.0; n];
    let mut t = vec![0.0; n];
    for v in 0..graph.node_count() {
        let d = plan.district_of(v) as usize;
        g[d] += node_attr(graph, v, group_attr)?;
        t[d] += match total_attr {
            Some(name) => node_attr(graph, v, name)?,
            None => graph.pop(v) as f64,
        };
    }
    let (gs, ts): (f64, f64) = (g.iter().sum(), t.iter().sum());
    if gs <= 0.0 || ts - gs <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "dissimilarity needs both group and non-group members (group `{group_attr}`)"
        )));
    }
    Ok(0.5
        * g.iter()
            .zip(&t)
            .map(|(gi, ti)| (gi / gs - (ti - gi) / (ts - gs)).abs())
            .sum::<f64>())
}

fn node_attr(graph: &Graph, v: usize, name: &str) -> Result<f64> {
    graph.attr(v, name).ok_or_else(|| {
        Error::InvalidParameter(format!("node `{}` lacks attribute `{name}`", graph.id(v)))
    })
}

/// Per-district share `a / (a + b)` of two vote attributes, sorted ascending.
pub fn district_shares(graph: &Graph, plan: &Plan, attr_a: &str, attr_b: &str) -> Result<Vec<f64>> {
    let n = plan.districts_count();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for v in 0..graph.node_count() {
        let d = plan.district_of(v) as usize;
        a[d] += node_attr(graph, v, attr_a)?;
        b[d] += node_attr(graph, v, attr_b)?;
    }
    let mut shares: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| if x + y > 0.0 { x / (x + y) } else { 0.0 })
        .collect();
    shares.sort_by(f64::total_cmp);
    Ok(shares)
}

fn check_ranks(ensemble: &[Vec<f64>], weights: Option<&[f64]>) -> Result<usize> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::EmptySupport("ensemble has no plans".into()))?;
    if ensemble.iter().any(|s| s.len() != first.len()) {
        return Err(Error::InvalidParameter("plans differ in district count".into()));
    }
    if let Some(w) = weights {
        if w.len() != ensemble.len() {
            return Err(Error::InvalidParameter("one weight per plan required".into()));
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::EmptySupport("all ensemble weights are zero".into()));
        }
    }
    Ok(first.len())
}

/// Weighted mean of the rank-`k` share across an ensemble of sorted share
/// vectors.
pub fn rank_means(ensemble: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = check_ranks(ensemble, weights)?;
    let total: f64 = weights.map_or(ensemble.len() as f64, |w| w.iter().sum());
    Ok((0..n)
        .map(|k| {
            ensemble
                .iter()
                .enumerate()
                .map(|(j, s)| s[k] * weights.map_or(1.0, |w| w[j]))
                .sum::<f64>()
                / total
        })
        .collect())
}

/// Weighted median of the rank-`k` share.
pub fn rank_medians(ensemble: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = check_ranks(ensemble, weights)?;
    Ok((0..n)
        .map(|k| {
            let values: Vec<f64> = ensemble.iter().map(|s| s[k]).collect();
            weighted_quantile(&values, weights, 0.5)
        })
        .collect())
}

/// Sum of squared deviations of a plan's sorted shares from the ensemble
/// rank means.
pub fn gerrymandering_index(plan_shares: &[f64], rank_means: &[f64]) -> f64 {
    plan_shares
        .iter()
        .zip(rank_means)
        .map(|(s, m)| (s - m).powi(2))
        .sum()
}

/// Sum of `share_k - median_k` over each group of (0-based) ranks.
pub fn grouped_deviations(
    plan_shares: &[f64],
    rank_medians: &[f64],
    groups: &[Vec<usize>],
) -> Result<Vec<f64>> {
    groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|&k| {
                    if k >= plan_shares.len() || k >= rank_medians.len() {
                        Err(Error::InvalidParameter(format!("rank {} out of range", k + 1)))
                    } else {
                        Ok(plan_shares[k] - rank_medians[k])
                    }
                })
                .sum()
        })
        .collect()
}

/// `log sum exp(x)`, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Weights normalized to sum 1 from log weights.
pub fn normalized_weights(log_weights: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(log_weights);
    if z == f64::NEG_INFINITY {
        return vec![0.0; log_weights.len()];
    }
    log_weights.iter().map(|w| (w - z).exp()).collect()
}

/// Importance-sampling ESS `(sum w)^2 / sum w^2`.
pub fn ess_importance(log_weights: &[f64]) -> f64 {
    let w = normalized_weights(log_weights);
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 == 0.0 {
        0.0
    } else {
        1.0 / s2
    }
}

/// ESS for estimating the mean of `h`: weights `w_i |h_i - mu|`, normalized.
/// Falls back to [`ess_importance`] when `h` is constant under the weights.
pub fn ess_importance_for(log_weights: &[f64], h: &[f64]) -> f64 {
    let w = normalized_weights(log_weights);
    let mu: f64 = w.iter().zip(h).map(|(w, h)| w * h).sum();
    let v: Vec<f64> = w.iter().zip(h).map(|(w, h)| w * (h - mu).abs()).collect();
    let s: f64 = v.iter().sum();
    if s <= 0.0 {
        return ess_importance(log_weights);
    }
    1.0 / v.iter().map(|x| (x / s).powi(2)).sum::<f64>()
}

/// Autocorrelation ESS with Geyer's initial monotone sequence estimator.
pub fn ess_mcmc(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 2 {
        return n as f64;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let acov = |lag: usize| -> f64 {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    };
    let g0 = acov(0);
    if g0 <= 0.0 {
        return n as f64;
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = acov(2 * m) + acov(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        m += 1;
    }
    let tau = (2.0 * sum - g0) / g0;
    if tau <= 0.0 {
        n as f64
    } else {
        n as f64 / tau
    }
}

/// Number of distinct plans up to district relabeling.
pub fn unique_plans(plans: &[Plan]) -> usize {
    plans.iter().map(Plan::canonical).collect::<HashSet<_>>().len()
}

/// `q`-quantile of `values` under optional weights (lower interpolation).
pub fn weighted_quantile(values: &[f64], weights: Option<&[f64]>, q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = idx.iter().map(|&i| w(i)).sum();
    let mut acc = 0.0;
    for &i in &idx {
        acc += w(i);
        if acc >= q * total - 1e-12 * total {
            return values[i];
        }
    }
    values[*idx.last().unwrap()]
}

/// Statistics of one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub dev: f64,
    pub rem: f64,
    pub spl: BTreeMap<String, u64>,
    pub log_tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shares: Option<Vec<f64>>,
}

pub fn plan_stats(
    graph: &Graph,
    plan: &Plan,
    labeling: Option<&Labeling>,
    votes: Option<(&str, &str)>,
) -> Result<PlanStats> {
    Ok(PlanStats {
        dev: dev(graph, plan)?,
        rem: rem(graph, plan),
        spl: labeling.map_or_else(BTreeMap::new, |l| spl_by_level(graph, plan, l)),
        log_tau: log_tau_plan(graph, plan),
        shares: votes
            .map(|(a, b)| district_shares(graph, plan, a, b))
            .transpose()?,
    })
}

/// VI between consecutive disjoint pairs `(0,1), (2,3), ...` of `plans`.
pub fn pairwise_vi(graph: &Graph, plans: &[Plan]) -> Vec<f64> {
    plans
        .chunks_exact(2)
        .map(|p| variation_of_information(graph, &p[0], &p[1]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::grid;

    fn plan(a: &[u32], n: u32) -> Plan {
        Plan::new(a.to_vec(), n).unwrap()
    }

    #[test]
    fn dev_examples() {
        let g = Graph::from_edges(&[1, 3], &[(0, 1)]).unwrap();
        assert_eq!(dev(&g, &plan(&[0, 1], 2)).unwrap(), 0.5);
        let g = Graph::from_edges(&[2, 2], &[(0, 1)]).unwrap();
        assert_eq!(dev(&g, &plan(&[0, 1], 2)).unwrap(), 0.0);
        assert!(dev(&g, &plan(&[0, 0], 2)).is_err());
    }

    #[test]
    fn rem_examples() {
        let c4 = Graph::from_edges(&[1; 4], &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        assert_eq!(rem(&c4, &plan(&[0, 0, 1, 1], 2)), 0.5);
        assert_eq!(rem(&c4, &plan(&[0; 4], 1)), 0.0);
        assert_eq!(rem(&c4, &plan(&[0, 1, 2, 3], 4)), 1.0);
    }

    #[test]
    fn spl_examples() {
        let g = grid(2, 2, &[1; 4]).with_units("county", |_, c| format!("c{c}")).build();
        let l = Labeling::from_graph(&g, &["county"]).unwrap();
        let level = &l.levels()[0];
        // columns are the units
        assert_eq!(spl(&g, &plan(&[0, 1, 0, 1], 2), level), 0);
        assert_eq!(spl(&g, &plan(&[0, 0, 1, 1], 2), level), 2);
        assert_eq!(spl(&g, &plan(&[0, 0, 0, 1], 2), level), 1);
    }

    #[test]
    fn vi_examples() {
        let g = grid(2, 2, &[1; 4]).build();
        let a = plan(&[0, 0, 1, 1], 2);
        let relabeled = plan(&[1, 1, 0, 0], 2);
        let b = plan(&[0, 1, 0, 1], 2);
        assert_eq!(variation_of_information(&g, &a, &relabeled), 0.0);
        let v = variation_of_information(&g, &a, &b);
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(v, variation_of_information(&g, &b, &a));
    }

    #[test]
    fn dissimilarity_examples() {
        let g = grid(1, 4, &[10; 4]).with_attr("grp", &[5.0, 5.0, 5.0, 5.0]).build();
        let p = plan(&[0, 0, 1, 1], 2);
        assert!(dissimilarity_index(&g, &p, "grp", None).unwrap().abs() < 1e-12);
        let g = grid(1, 4, &[10; 4]).with_attr("grp", &[10.0, 10.0, 0.0, 0.0]).build();
        assert!((dissimilarity_index(&g, &p, "grp", None).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gerrymandering_by_hand() {
        let ensemble = vec![vec![0.3, 0.6], vec![0.4, 0.7]];
        let means = rank_means(&ensemble, None).unwrap();
        assert!((means[0] - 0.35).abs() < 1e-12 && (means[1] - 0.65).abs() < 1e-12);
        // (0.2 - 0.35)^2 + (0.8 - 0.65)^2
        assert!((gerrymandering_index(&[0.2, 0.8], &means) - 0.045).abs() < 1e-12);
        let single = vec![vec![0.3, 0.6]];
        let m = rank_means(&single, None).unwrap();
        assert_eq!(gerrymandering_index(&single[0], &m), 0.0);
    }

    #[test]
    fn grouped_deviation_sums() {
        let medians = vec![0.3, 0.5, 0.7];
        let shares = vec![0.35, 0.45, 0.8];
        let g = grouped_deviations(&shares, &medians, &[vec![0], vec![1, 2]]).unwrap();
        assert!((g[0] - 0.05).abs() < 1e-12);
        assert!((g[1] - 0.05).abs() < 1e-12);
        let all = grouped_deviations(&shares, &medians, &[vec![0, 1, 2]]).unwrap();
        assert!((all[0] - (g[0] + g[1])).abs() < 1e-12);
        assert!(grouped_deviations(&shares, &medians, &[vec![3]]).is_err());
    }

    #[test]
    fn ess_examples() {
        assert!((ess_importance(&[0.0; 10]) - 10.0).abs() < 1e-9);
        let mut lw = vec![f64::NEG_INFINITY; 10];
        lw[3] = 2.0;
        assert!((ess_importance(&lw) - 1.0).abs() < 1e-12);
        let h: Vec<f64> = (0..10).map(|i| i as f64).collect();
        // |h - 4.5| sums to 25 with squares summing to 82.5
        assert!((ess_importance_for(&[0.0; 10], &h) - 625.0 / 82.5).abs() < 1e-9);
    }

    #[test]
    fn mcmc_ess_of_white_noise() {
        use rand::Rng;
        let mut rng = crate::RngStream::new(1).rng();
        let x: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
        let ess = ess_mcmc(&x);
        assert!((ess / 20_000.0 - 1.0).abs() < 0.1, "ess {ess}");
        // a strongly correlated series has far fewer effective draws
        let mut y = vec![0.0; 20_000];
        for i in 1..y.len() {
            y[i] = 0.95 * y[i - 1] + rng.random::<f64>() - 0.5;
        }
        assert!(ess_mcmc(&y) < 2_000.0);
    }

    #[test]
    fn unique_plans_collapses_relabelings() {
        let plans = vec![plan(&[0, 0, 1], 2), plan(&[1, 1, 0], 2), plan(&[0, 1, 1], 2)];
        assert_eq!(unique_plans(&plans), 2);
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 2]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - 1000.0 - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn weighted_quantiles() {
        let v = [3.0, 1.0, 2.0];
        assert_eq!(weighted_quantile(&v, None, 0.5), 2.0);
        assert_eq!(weighted_quantile(&v, Some(&[10.0, 1.0, 1.0]), 0.5), 3.0);
    }
}

//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::statistics::Statistics;

use redist_smc::calibrate::{sample_distribution, tv_band, tv_distance};
use redist_smc::constraint::{Constraint, RemCap};
use redist_smc::enumerate::{enumerate_partitions, reweight_reference, ReferenceSet, DEFAULT_CAP};
use redist_smc::generate::{grid, random_pops};
use redist_smc::graph::EdgeRef;
use redist_smc::io::write_ensemble;
use redist_smc::mcmc::{
    initial_plan, merge_split_step, run_chain, run_chains, ChainState, McmcConfig, StepParams,
};
use redist_smc::metrics::{
    ess_importance, ess_mcmc, pairwise_vi, rem, spl, unique_plans, weighted_quantile,
    within_tolerance,
};
use redist_smc::sampler::{PlanOrigin, SampleRun};
use redist_smc::smc::{run_smc, Categorical, SmcConfig, Truncation, WeightedEnsemble};
use redist_smc::splitter::{split_district, split_tree, SplitParams, Tolerance};
use redist_smc::tree_count::{log_spanning_tree_count, log_tree_count_of};
use redist_smc::ust::{Hierarchical, TreeSampler, Wilson};
use redist_smc::{Graph, Labeling, Plan, RngStream, Subgraph};

// criterion 1
const TREE_GRAPHS: usize = 200;
const TREE_MAX_NODES: usize = 7;
const TREE_REL_ERR: f64 = 1e-9;
const TREE_SECONDS: f64 = 10.0;
// criterion 2
const CHI2_ALPHA: f64 = 0.001;
const DRAWS_PER_TREE: usize = 200;
// criterion 3
const SPLIT_DRAWS: usize = 100_000;
const SPLIT_SE: f64 = 3.0;
// criterion 4
const CALIB_PARTICLES: usize = 10_000;
const CALIB_TV: f64 = 0.05;
const CALIB_SECONDS: f64 = 60.0;
// light tempering; with two districts the only resample is the final one
const CALIB_ALPHA: f64 = 0.1;
// criterion 6
const BRACKET_TREES: usize = 100_000;
const BRACKET_SE: f64 = 3.0;
const BRACKET_MIN_HITS: usize = 500;
// criterion 7
const MCMC_ITERATIONS: u64 = 200_000;
const MCMC_BURN_IN: u64 = 2_000;
const MCMC_TV: f64 = 0.1;
const BALANCE_STEPS: usize = 200_000;
const BALANCE_SE: f64 = 3.0;
// criterion 8
const EFFICIENCY_SAMPLES: usize = 2_000;
// criterion 9
const REM_TAU_CORRELATION: f64 = 0.9;

struct Line {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

/// Every plan emitted in any run, for criterion 5.
#[derive(Default)]
struct Audit {
    plans: usize,
    dev_violations: usize,
    disconnected: usize,
    spl_checked: usize,
    spl_violations: usize,
}

static AUDIT: Mutex<Audit> = Mutex::new(Audit {
    plans: 0,
    dev_violations: 0,
    disconnected: 0,
    spl_checked: 0,
    spl_violations: 0,
});

fn audit(graph: &Graph, plans: &[Plan], pop_tol: f64, labeling: Option<&Labeling>) {
    let tol = Tolerance::from_f64(pop_tol).unwrap();
    let mut a = AUDIT.lock().unwrap();
    for p in plans {
        a.plans += 1;
        if !within_tolerance(graph, p, tol) {
            a.dev_violations += 1;
        }
        if !p.is_connected(graph) {
            a.disconnected += 1;
        }
        if let Some(l) = labeling {
            a.spl_checked += 1;
            let cap = p.districts_count() as u64 - 1;
            if l.levels().iter().any(|level| spl(graph, p, level) > cap) {
                a.spl_violations += 1;
            }
        }
    }
}

fn smc(
    graph: &Graph,
    config: &SmcConfig,
    constraint: &Constraint,
    trees: &dyn TreeSampler,
    labeling: Option<&Labeling>,
) -> WeightedEnsemble {
    let ens = run_smc(graph, config, constraint, trees).unwrap();
    let kept: Vec<Plan> = ens
        .plans
        .iter()
        .zip(&ens.log_weights)
        .filter(|(_, w)| w.is_finite())
        .map(|(p, _)| p.clone())
        .collect();
    audit(graph, &kept, config.pop_tol, labeling);
    ens
}

// ---------------------------------------------------------------- oracles

/// All spanning trees by subset enumeration; each parallel copy of an edge
/// is a separate element. Returns trees as sorted edge-copy lists.
fn brute_spanning_trees(graph: &Graph) -> Vec<Vec<EdgeRef>> {
    let m = graph.node_count();
    let copies: Vec<(usize, usize, EdgeRef)> = graph
        .edges()
        .iter()
        .enumerate()
        .flat_map(|(i, e)| {
            (0..e.multiplicity).map(move |c| {
                (
                    e.u,
                    e.v,
                    EdgeRef {
                        edge: i as u32,
                        copy: c,
                    },
                )
            })
        })
        .collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        r
    }
    fn rec(
        copies: &[(usize, usize, EdgeRef)],
        start: usize,
        need: usize,
        parent: &mut Vec<usize>,
        chosen: &mut Vec<EdgeRef>,
        out: &mut Vec<Vec<EdgeRef>>,
    ) {
        if need == 0 {
            out.push(chosen.clone());
            return;
        }
        for i in start..copies.len() {
            if copies.len() - i < need {
                break;
            }
            let (u, v, r) = copies[i];
            let (a, b) = (find(parent, u), find(parent, v));
            if a == b {
                continue;
            }
            let saved = parent.clone();
            parent[a] = b;
            chosen.push(r);
            rec(copies, i + 1, need - 1, parent, chosen, out);
            chosen.pop();
            *parent = saved;
        }
    }
    let mut out = Vec::new();
    if m == 1 {
        return vec![Vec::new()];
    }
    rec(&copies, 0, m - 1, &mut (0..m).collect(), &mut Vec::new(), &mut out);
    out
}

fn random_connected_graph(rng: &mut impl Rng) -> Graph {
    let m = rng.random_range(2..=TREE_MAX_NODES);
    let mut edges = Vec::new();
    for v in 1..m {
        edges.push((rng.random_range(0..v), v));
    }
    let p = rng.random_range(0.1..0.9);
    for u in 0..m {
        for v in u + 1..m {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    // occasional parallel edges
    let extra = rng.random_range(0..3);
    for _ in 0..extra {
        let e = edges[rng.random_range(0..edges.len())];
        edges.push(e);
    }
    Graph::from_edges(&vec![1; m], &edges).unwrap()
}

fn chi_square(counts: &HashMap<Vec<EdgeRef>, usize>, support: &[Vec<EdgeRef>], draws: usize) -> (f64, f64, bool) {
    let expected = draws as f64 / support.len() as f64;
    let stat: f64 = support
        .iter()
        .map(|t| {
            let o = *counts.get(t).unwrap_or(&0) as f64;
            (o - expected).powi(2) / expected
        })
        .sum();
    let outside = counts.keys().any(|t| !support.contains(t));
    let crit = ChiSquared::new((support.len() - 1) as f64)
        .unwrap()
        .inverse_cdf(1.0 - CHI2_ALPHA);
    (stat, crit, !outside)
}

/// The 4x4 instance shared by several criteria.
fn calibration_grid() -> (Graph, Arc<Labeling>) {
    let pops = random_pops(16, 50, 150, 2);
    let g = grid(4, 4, &pops)
        .with_units("county", |r, c| format!("{}{}", r / 2, c / 2))
        .with_units("tract", |r, c| format!("{}{}", r, c / 2))
        .build();
    let labeling = Arc::new(Labeling::from_graph(&g, &["county", "tract"]).unwrap());
    (g, labeling)
}

fn tv_to(refset: &ReferenceSet, target: &[f64], plans: &[Plan], log_w: &[f64]) -> (f64, f64) {
    let (mass, outside) = sample_distribution(refset, plans, log_w).unwrap();
    (tv_distance(&mass, target, outside), outside)
}

// ---------------------------------------------------------------- criteria

fn matrix_tree() -> (bool, String) {
    let started = Instant::now();
    let mut rng = RngStream::new(101).rng();
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    for _ in 0..TREE_GRAPHS {
        let g = random_connected_graph(&mut rng);
        let count = brute_spanning_trees(&g).len() as f64;
        largest = largest.max(count as usize);
        let tau = log_spanning_tree_count(&g).exp();
        worst = worst.max((tau - count).abs() / count);
    }
    let secs = started.elapsed().as_secs_f64();
    (
        worst < TREE_REL_ERR && secs < TREE_SECONDS,
        format!(
            "{TREE_GRAPHS} graphs, max relative error {worst:.2e} (< {TREE_REL_ERR:.0e}), largest tau {largest}, {secs:.2}s (< {TREE_SECONDS}s)"
        ),
    )
}

fn uniformity() -> (bool, String) {
    let mut parts = Vec::new();
    let mut all = true;
    let mut check = |name: &str, g: &Graph, trees: &dyn TreeSampler, support: Vec<Vec<EdgeRef>>, seed: u64| {
        let sub = Subgraph::whole(g);
        let draws = DRAWS_PER_TREE * support.len();
        let mut rng = RngStream::new(seed).rng();
        let mut counts: HashMap<Vec<EdgeRef>, usize> = HashMap::new();
        for _ in 0..draws {
            let t = trees.sample(&sub, &mut rng).unwrap();
            *counts.entry(t.canonical_edges()).or_default() += 1;
        }
        let (stat, crit, inside) = chi_square(&counts, &support, draws);
        let count_ok = (trees.log_count(&sub) - (support.len() as f64).ln()).abs() < 1e-9;
        let ok = stat < crit && inside && count_ok;
        all &= ok;
        parts.push(format!("{name} chi2 {stat:.1} < {crit:.1} over {} trees", support.len()));
    };
    let triangle = Graph::from_edges(&[1; 3], &[(0, 1), (1, 2), (0, 2)]).unwrap();
    let c4 = Graph::from_edges(&[1; 4], &[(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
    let k4 = Graph::from_edges(&[1; 4], &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]).unwrap();
    check("triangle", &triangle, &Wilson, brute_spanning_trees(&triangle), 1);
    check("C4", &c4, &Wilson, brute_spanning_trees(&c4), 2);
    check("K4", &k4, &Wilson, brute_spanning_trees(&k4), 3);

    // 2x3 grid, left 2x2 block is one unit, right column the other
    let g = grid(2, 3, &[1; 6])
        .with_units("county", |_, c| if c < 2 { "L".into() } else { "R".into() })
        .build();
    let labeling = Arc::new(Labeling::from_graph(&g, &["county"]).unwrap());
    let level = &labeling.levels()[0];
    let restricted: Vec<Vec<EdgeRef>> = brute_spanning_trees(&g)
        .into_iter()
        .filter(|t| {
            // a unit's restriction spans it iff it holds size - 1 tree edges
            (0..level.unit_count() as u32).all(|u| {
                let size = level.unit_of.iter().filter(|&&x| x == u).count();
                let inside = t
                    .iter()
                    .filter(|r| {
                        let e = g.edge(r.edge);
                        level.unit_of[e.u] == u && level.unit_of[e.v] == u
                    })
                    .count();
                inside == size - 1
            })
        })
        .collect();
    check("hierarchical 2x3", &g, &Hierarchical::new(labeling.clone()), restricted, 4);
    (all, parts.join("; "))
}

fn split_probabilities() -> (bool, String) {
    // a 5-cycle with two chords from node 1
    let pops = [2, 1, 1, 2, 1];
    let g = Graph::from_edges(&pops, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 4), (1, 3)]).unwrap();
    let total = g.total_pop();
    let tol = Tolerance::new(3, 20).unwrap();
    let n = 2usize;
    let trees = brute_spanning_trees(&g);
    let tau = trees.len() as f64;

    // exact probability by walking every tree and every valid edge
    let admits = |s: u64| tol.admits(s, total, n as u64);
    let side_of = |tree: &[EdgeRef], skip: usize| -> Vec<usize> {
        // nodes reachable from node 0 without the skipped copy
        let mut seen = vec![false; g.node_count()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for (i, r) in tree.iter().enumerate() {
                if i == skip {
                    continue;
                }
                let e = g.edge(r.edge);
                let w = if e.u == v { e.v } else if e.v == v { e.u } else { continue };
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        (0..g.node_count()).filter(|&v| seen[v]).collect()
    };
    let mut k_max = 0;
    let mut splits: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for t in &trees {
        let mut ok = 0;
        for i in 0..t.len() {
            let a = side_of(t, i);
            let pa: u64 = a.iter().map(|&v| pops[v]).sum();
            if admits(pa) && admits(total - pa) {
                ok += 1;
                let b: Vec<usize> = (0..g.node_count()).filter(|v| !a.contains(v)).collect();
                splits.push((a, b));
            }
        }
        k_max = k_max.max(ok);
    }
    let k = k_max;
    let district_of = |a: &Vec<usize>, b: &Vec<usize>| -> Vec<usize> {
        let pa: u64 = a.iter().map(|&v| pops[v]).sum();
        let pb = total - pa;
        let da = (n as i64 * pa as i64 - total as i64).abs();
        let db = (n as i64 * pb as i64 - total as i64).abs();
        match da.cmp(&db) {
            std::cmp::Ordering::Less => a.clone(),
            std::cmp::Ordering::Greater => b.clone(),
            std::cmp::Ordering::Equal => if a.contains(&0) { a.clone() } else { b.clone() },
        }
    };
    let mut exact: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for (a, b) in &splits {
        *exact.entry(district_of(a, b)).or_default() += 1.0 / (tau * k as f64);
    }
    // closed form: tau(A) tau(B) |C(A, B)| / (tau(G) k)
    let mut formula_err: f64 = 0.0;
    for (d, p) in &exact {
        let rest: Vec<usize> = (0..g.node_count()).filter(|v| !d.contains(v)).collect();
        let ta = log_tree_count_of(&Subgraph::new(&g, d.clone())).exp();
        let tb = log_tree_count_of(&Subgraph::new(&g, rest.clone())).exp();
        let c = g
            .edges()
            .iter()
            .filter(|e| d.contains(&e.u) != d.contains(&e.v))
            .map(|e| e.multiplicity as f64)
            .sum::<f64>();
        formula_err = formula_err.max((ta * tb * c / (tau * k as f64) - p).abs());
    }

    let sub = Subgraph::whole(&g);
    let params = SplitParams {
        n,
        tolerance: tol,
        k,
        stage: 1,
        total_pop: total,
    };
    let mut rng = RngStream::new(303).rng();
    let mut seen: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut rejected = 0usize;
    for _ in 0..SPLIT_DRAWS {
        let out = split_district(&sub, &params, &Wilson, &mut rng).unwrap();
        if out.accepted {
            *seen.entry(out.district).or_default() += 1;
        } else {
            rejected += 1;
        }
    }
    let n_draws = SPLIT_DRAWS as f64;
    let mut worst_z: f64 = 0.0;
    let p_reject = 1.0 - exact.values().sum::<f64>();
    let mut outcomes: Vec<(f64, usize)> = exact
        .iter()
        .map(|(d, p)| (*p, *seen.get(d).unwrap_or(&0)))
        .collect();
    outcomes.push((p_reject, rejected));
    for (p, c) in &outcomes {
        let se = (p * (1.0 - p) / n_draws).sqrt().max(1e-12);
        worst_z = worst_z.max((*c as f64 / n_draws - p).abs() / se);
    }
    let unexpected = seen.keys().any(|d| !exact.contains_key(d));
    (
        worst_z <= SPLIT_SE && formula_err < 1e-12 && !unexpected,
        format!(
            "tau {tau}, k = K = {k}, {} districts + rejection, max |z| {worst_z:.2} (<= {SPLIT_SE}), closed form vs tree walk {formula_err:.1e}",
            exact.len()
        ),
    )
}

fn calibration() -> (bool, String) {
    let (g, labeling) = calibration_grid();
    let mut parts = Vec::new();
    let mut all = true;
    let mut run = |name: &str, pop_tol: f64, rho: f64, constraint: Constraint, lab: Option<&Labeling>, seed: u64| {
        let started = Instant::now();
        let mut refset = enumerate_partitions(&g, 2, pop_tol, DEFAULT_CAP).unwrap();
        if let Some(l) = lab {
            refset.annotate(&g, l);
        }
        let target = reweight_reference(&refset, &g, rho, &constraint, lab).unwrap();
        let support = target.iter().filter(|&&p| p > 0.0).count();
        let trees: Arc<dyn TreeSampler> = match lab {
            Some(_) => Arc::new(Hierarchical::new(labeling.clone())),
            None => Arc::new(Wilson),
        };
        let config = SmcConfig {
            particles: CALIB_PARTICLES,
            districts: 2,
            pop_tol,
            rho,
            alpha: CALIB_ALPHA,
            truncation: Truncation::None,
            seed,
            ..SmcConfig::default()
        };
        let ens = smc(&g, &config, &constraint, trees.as_ref(), lab);
        let (tv, outside) = tv_to(&refset, &target, &ens.plans, &ens.log_weights);
        let ess = ess_importance(&ens.log_weights);
        let band = tv_band(&target, ess.round() as usize, 200, seed);
        let secs = started.elapsed().as_secs_f64();
        let ok = tv <= CALIB_TV && secs < CALIB_SECONDS && outside == 0.0;
        all &= ok;
        parts.push(format!(
            "{name}: TV {tv:.4} (band {band:.4}) over {support} plans, ESS {ess:.0}, {secs:.1}s"
        ));
    };
    run("rho 0.5, D 0.05", 0.05, 0.5, Constraint::none(), None, 41);

    // rem cap at the lower quartile of the reference set
    let refset = enumerate_partitions(&g, 2, 0.1, DEFAULT_CAP).unwrap();
    let rems: Vec<f64> = refset.plans.iter().map(|p| p.rem).collect();
    let cap = weighted_quantile(&rems, None, 0.25);
    run("rho 0, rem cap", 0.1, 0.0, Constraint::none().with(RemCap { max: cap }), None, 42);

    run("rho 1, county+tract", 0.1, 1.0, Constraint::none(), Some(&labeling), 43);
    (all, parts.join("; "))
}

fn hard_constraints() -> (bool, String) {
    // extra runs beyond the ones audited elsewhere
    let pops = random_pops(36, 90, 110, 5);
    let g = grid(6, 6, &pops)
        .with_units("county", |r, c| format!("{}{}", r / 3, c / 3))
        .build();
    let labeling = Arc::new(Labeling::from_graph(&g, &["county"]).unwrap());
    for seed in 0..3 {
        let config = SmcConfig {
            particles: 500,
            districts: 4,
            pop_tol: 0.03,
            rho: 0.5,
            seed,
            ..SmcConfig::default()
        };
        smc(&g, &config, &Constraint::none(), &Wilson, None);
        let config = SmcConfig {
            pop_tol: 0.1,
            rho: 1.0,
            ..config
        };
        smc(&g, &config, &Constraint::none(), &Hierarchical::new(labeling.clone()), Some(&labeling));
    }
    let a = AUDIT.lock().unwrap();
    (
        a.plans > 0 && a.dev_violations == 0 && a.disconnected == 0 && a.spl_violations == 0,
        format!(
            "{} plans audited: {} over the deviation cap, {} disconnected; {} with levels, {} over the split cap",
            a.plans, a.dev_violations, a.disconnected, a.spl_checked, a.spl_violations
        ),
    )
}

fn cut_bracket() -> (bool, String) {
    // unit grid with a loose cap: trees often hold several valid edges
    let g = grid(4, 4, &[1; 16]).build();
    let tol = Tolerance::new(1, 4).unwrap();
    let k = 2;
    let params = SplitParams {
        n: 2,
        tolerance: tol,
        k,
        stage: 1,
        total_pop: 16,
    };
    let sub = Subgraph::whole(&g);
    let mut rng = RngStream::new(606).rng();
    let m = g.edges().len();
    let (mut valid, mut top, mut chosen) = (vec![0usize; m], vec![0usize; m], vec![0usize; m]);
    let mut k_hat = 0;
    for _ in 0..BRACKET_TREES {
        let tree = Wilson.sample(&sub, &mut rng).unwrap();
        let devs = redist_smc::splitter::edge_deviations(&tree, 16, 2);
        let ok = redist_smc::splitter::ok_count(&devs, 16, tol);
        k_hat = k_hat.max(ok);
        for (rank, d) in devs.iter().enumerate() {
            if tol.admits(d.below_pop, 16, 2) && tol.admits(d.above_pop, 16, 2) {
                let e = d.edge.edge.edge as usize;
                valid[e] += 1;
                if rank < k {
                    top[e] += 1;
                }
            }
        }
        let out = split_tree(&sub, &tree, &params, &mut rng);
        if out.accepted {
            let (a, b) = out.cut.unwrap();
            let e = g
                .edges()
                .iter()
                .position(|x| (x.u, x.v) == (a.min(b), a.max(b)))
                .unwrap();
            chosen[e] += 1;
        }
    }
    let mut checked = 0;
    let mut bad = 0;
    let mut tightest: f64 = f64::INFINITY;
    for e in 0..m {
        if valid[e] < BRACKET_MIN_HITS {
            continue;
        }
        checked += 1;
        let hits = valid[e] as f64;
        let p = chosen[e] as f64 / hits;
        let r = top[e] as f64 / hits;
        let se = (p * (1.0 - p) / hits).sqrt() + (r * (1.0 - r) / hits).sqrt();
        let lower = (r * (1.0 + 1.0 / k as f64) - 1.0).max(0.0);
        let upper = 1.0 / k as f64;
        if p < lower - BRACKET_SE * se || p > upper + BRACKET_SE * se {
            bad += 1;
        }
        tightest = tightest.min((p - lower).min(upper - p) / se.max(1e-12));
    }
    (
        checked > 0 && bad == 0 && k_hat > k,
        format!(
            "k = {k} < observed max ok edges {k_hat}; {checked} edges checked, {bad} outside the bracket, closest margin {tightest:.1} SE"
        ),
    )
}

fn mcmc_stationarity() -> (bool, String) {
    let (g, _) = calibration_grid();
    let pop_tol = 0.1;
    let refset = enumerate_partitions(&g, 2, pop_tol, DEFAULT_CAP).unwrap();
    let target = reweight_reference(&refset, &g, 1.0, &Constraint::none(), None).unwrap();
    let params = StepParams {
        tolerance: Tolerance::from_f64(pop_tol).unwrap(),
        rho: 1.0,
        k: None,
    };
    let start = initial_plan(&g, 2, pop_tol, &Constraint::none(), &Wilson, 7).unwrap();
    let mut rng = RngStream::new(707).rng();
    let out = run_chain(
        &g,
        start,
        MCMC_ITERATIONS,
        MCMC_BURN_IN,
        1,
        &params,
        &Constraint::none(),
        &Wilson,
        &mut rng,
    )
    .unwrap();
    audit(&g, &out.plans, pop_tol, None);
    let flat = vec![0.0; out.plans.len()];
    let (tv, _) = tv_to(&refset, &target, &out.plans, &flat);

    // two plans on a 4-cycle whose edge {0,1} is doubled: pi(A) = 2 pi(B)
    let c4 = Graph::from_edges(&[1; 4], &[(0, 1), (0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
    let a = Plan::new(vec![0, 0, 1, 1], 2).unwrap();
    let b = Plan::new(vec![0, 1, 1, 0], 2).unwrap();
    let p = StepParams {
        tolerance: Tolerance::new(0, 1).unwrap(),
        rho: 1.0,
        k: None,
    };
    let leave = |from: &Plan, seed: u64| -> f64 {
        let mut rng = RngStream::new(seed).rng();
        let mut moved = 0;
        for _ in 0..BALANCE_STEPS {
            let mut s = ChainState::new(&c4, from.clone(), &p, &Constraint::none(), &Wilson).unwrap();
            merge_split_step(&mut s, &c4, &p, &Constraint::none(), &Wilson, &mut rng).unwrap();
            if s.plan.canonical() != from.canonical() {
                moved += 1;
            }
        }
        moved as f64 / BALANCE_STEPS as f64
    };
    let (pab, pba) = (leave(&a, 71), leave(&b, 72));
    let (pi_a, pi_b) = (2.0 / 3.0, 1.0 / 3.0);
    let n = BALANCE_STEPS as f64;
    let se = (pi_a * pi_a * pab * (1.0 - pab) / n + pi_b * pi_b * pba * (1.0 - pba) / n).sqrt();
    let z = (pi_a * pab - pi_b * pba).abs() / se;
    (
        tv <= MCMC_TV && z <= BALANCE_SE,
        format!(
            "{MCMC_ITERATIONS} steps: TV {tv:.4} (<= {MCMC_TV}) over {} plans, acceptance {:.3}; two-plan flows {:.4} vs {:.4}, |z| {z:.2} (<= {BALANCE_SE})",
            refset.len(),
            out.acceptance_rate,
            pi_a * pab,
            pi_b * pba
        ),
    )
}

fn efficiency() -> (bool, String) {
    let pops = random_pops(36, 50, 150, 8);
    let g = grid(6, 6, &pops).build();
    let pop_tol = 0.1;
    let config = SmcConfig {
        particles: EFFICIENCY_SAMPLES,
        districts: 4,
        pop_tol,
        rho: 1.0,
        truncation: Truncation::None,
        seed: 808,
        ..SmcConfig::default()
    };
    let ens = smc(&g, &config, &Constraint::none(), &Wilson, None);
    let smc_ess = ess_importance(&ens.log_weights);
    let smc_unique = unique_plans(&ens.plans);
    let table = Categorical::from_log_weights(&ens.log_weights).unwrap();
    let mut rng = RngStream::new(809).rng();
    let mut smc_draws: Vec<Plan> = (0..EFFICIENCY_SAMPLES)
        .map(|_| ens.plans[table.sample(&mut rng)].clone())
        .collect();

    let mcmc = McmcConfig {
        districts: 4,
        pop_tol,
        rho: 1.0,
        k: None,
        iterations: EFFICIENCY_SAMPLES as u64 + 1_000,
        burn_in: 1_000,
        thin: 1,
        chains: 1,
        seed: 810,
    };
    let chain = run_chains(&g, &mcmc, &Constraint::none(), &Wilson).unwrap().remove(0);
    audit(&g, &chain.plans, pop_tol, None);
    let rems: Vec<f64> = chain.plans.iter().map(|p| rem(&g, p)).collect();
    let chain_ess = ess_mcmc(&rems);
    let chain_unique = unique_plans(&chain.plans);

    let mut chain_draws = chain.plans.clone();
    smc_draws.shuffle(&mut rng);
    chain_draws.shuffle(&mut rng);
    let vi_smc = pairwise_vi(&g, &smc_draws);
    let vi_chain = pairwise_vi(&g, &chain_draws);
    let deciles: Vec<(f64, f64)> = (1..10)
        .map(|d| {
            let q = d as f64 / 10.0;
            (
                weighted_quantile(&vi_smc, None, q),
                weighted_quantile(&vi_chain, None, q),
            )
        })
        .collect();
    let dominates = deciles.iter().all(|(s, c)| s >= c);
    let (m_s, m_c) = (
        weighted_quantile(&vi_smc, None, 0.5),
        weighted_quantile(&vi_chain, None, 0.5),
    );
    (
        smc_ess > chain_ess && smc_unique > chain_unique && dominates,
        format!(
            "{EFFICIENCY_SAMPLES} samples each: ESS {smc_ess:.0} vs {chain_ess:.0}, unique {smc_unique} vs {chain_unique}, VI deciles dominate: {dominates} (median {m_s:.3} vs {m_c:.3}), chain acceptance {:.3}",
            chain.acceptance_rate
        ),
    )
}

fn rem_tau() -> (bool, String) {
    let (g, _) = calibration_grid();
    let refset = enumerate_partitions(&g, 2, 0.1, DEFAULT_CAP).unwrap();
    let whole = log_spanning_tree_count(&g);
    let rems: Vec<f64> = refset.plans.iter().map(|p| p.rem).collect();
    let gaps: Vec<f64> = refset.plans.iter().map(|p| whole - p.log_tau).collect();
    let r = rems.iter().covariance(gaps.iter()) / (rems.iter().std_dev() * gaps.iter().std_dev());
    (
        r >= REM_TAU_CORRELATION,
        format!("Pearson r {r:.4} (>= {REM_TAU_CORRELATION}) over {} plans", refset.len()),
    )
}

fn determinism() -> (bool, String) {
    let (g, labeling) = calibration_grid();
    let bytes = |run: &SampleRun| {
        let mut buf = Vec::new();
        write_ensemble(&g, run, &mut buf).unwrap();
        buf
    };
    let as_run = |ens: WeightedEnsemble| SampleRun {
        sampler: "smc".into(),
        origins: ens
            .log_stage_weights
            .iter()
            .map(|w| PlanOrigin::Particle {
                stage_log_weights: w.clone(),
            })
            .collect(),
        plans: ens.plans,
        log_weights: ens.log_weights,
        diagnostics: serde_json::Value::Null,
    };
    let mut outputs = Vec::new();
    for threads in [1, 2, 8] {
        let config = SmcConfig {
            particles: 2_000,
            districts: 3,
            pop_tol: 0.2,
            rho: 0.5,
            seed: 1010,
            threads: Some(threads),
            ..SmcConfig::default()
        };
        let wilson = smc(&g, &config, &Constraint::none(), &Wilson, None);
        let hier = smc(
            &g,
            &SmcConfig { rho: 1.0, ..config.clone() },
            &Constraint::none(),
            &Hierarchical::new(labeling.clone()),
            Some(&labeling),
        );
        let chains = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                run_chains(
                    &g,
                    &McmcConfig {
                        districts: 3,
                        pop_tol: 0.2,
                        rho: 0.5,
                        k: None,
                        iterations: 500,
                        burn_in: 0,
                        thin: 1,
                        chains: 4,
                        seed: 1011,
                    },
                    &Constraint::none(),
                    &Wilson,
                )
                .unwrap()
            });
        outputs.push((
            bytes(&as_run(wilson)),
            bytes(&as_run(hier)),
            chains.into_iter().map(|c| c.plans).collect::<Vec<_>>(),
        ));
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    (
        same,
        format!(
            "threads 1/2/8: SMC ensembles ({} and {} bytes, plain and hierarchical) and 4 merge-split chains identical: {same}",
            outputs[0].0.len(),
            outputs[0].1.len()
        ),
    )
}

fn main() {
    let criteria: [(u8, &'static str, fn() -> (bool, String)); 10] = [
        (1, "spanning tree counts", matrix_tree),
        (2, "uniform tree draws", uniformity),
        (3, "split probabilities", split_probabilities),
        (4, "proper weighting", calibration),
        (6, "cut probability bracket", cut_bracket),
        (7, "merge-split stationarity", mcmc_stationarity),
        (8, "efficiency direction", efficiency),
        (9, "rem vs log tau", rem_tau),
        (10, "determinism", determinism),
        // last: audits every plan emitted above
        (5, "hard constraints", hard_constraints),
    ];
    let mut lines: Vec<Line> = criteria
        .iter()
        .map(|&(id, name, f)| {
            let started = Instant::now();
            let (pass, detail) = f();
            Line {
                id,
                name,
                pass,
                detail,
                seconds: started.elapsed().as_secs_f64(),
            }
        })
        .collect();
    lines.sort_by_key(|l| l.id);
    println!();
    for l in &lines {
        println!(
            "criterion {:>2} [{}] {}: {} ({:.1}s)",
            l.id,
            if l.pass { "PASS" } else { "FAIL" },
            l.name,
            l.detail,
            l.seconds
        );
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

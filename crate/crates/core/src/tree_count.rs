//! Spanning-tree counts by the Matrix-Tree theorem, quotient multigraphs
//! and the hierarchical count tau_eta.
//!
//! All counts are returned as natural logarithms; a disconnected graph
//! has no spanning tree and yields `f64::NEG_INFINITY`.

use std::collections::BTreeMap;

use crate::graph::{Graph, Labeling, Level, LocalGraph, NodeRecord, Plan, Subgraph};

/// log det of the Laplacian with row/column 0 removed, via Cholesky.
pub(crate) fn log_tree_count_local(lg: &LocalGraph) -> f64 {
    let n = lg.len();
    if n <= 1 {
        return 0.0;
    }
    if !lg.is_connected() {
        return f64::NEG_INFINITY;
    }
    let k = n - 1;
    let mut a = vec![0.0f64; k * k];
    for (u, list) in lg.adj.iter().enumerate() {
        for &(w, _) in list {
            let w = w as usize;
            if u == w {
                continue;
            }
            if u > 0 {
                a[(u - 1) * k + (u - 1)] += 1.0;
                if w > 0 {
                    a[(u - 1) * k + (w - 1)] -= 1.0;
                }
            }
        }
    }
    cholesky_log_det(&mut a, k)
}

/// Cholesky factorization in place (lower triangle); returns log det or
/// -inf when the matrix is not positive definite.
fn cholesky_log_det(a: &mut [f64], k: usize) -> f64 {
    let mut log_det = 0.0;
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if d <= 0.0 {
            return f64::NEG_INFINITY;
        }
        log_det += d.ln();
        let ljj = d.sqrt();
        a[j * k + j] = ljj;
        for i in (j + 1)..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / ljj;
        }
    }
    log_det
}

/// log tau(G).
pub fn log_spanning_tree_count(graph: &Graph) -> f64 {
    log_tree_count_of(&Subgraph::whole(graph))
}

/// log tau of an induced subgraph; 0 for a single node (and for the empty set).
pub fn log_tree_count_of(sub: &Subgraph) -> f64 {
    log_tree_count_local(&sub.local_graph())
}

/// log tau(xi) = sum over districts of log tau(G_i).
pub fn log_tau_plan(graph: &Graph, plan: &Plan) -> f64 {
    plan.districts()
        .into_iter()
        .map(|nodes| {
            if nodes.is_empty() {
                f64::NEG_INFINITY
            } else {
                log_tree_count_of(&Subgraph::new(graph, nodes))
            }
        })
        .sum()
}

/// Quotient of an induced subgraph by a level. Quotient nodes are the units
/// meeting the subgraph, in order of their smallest member; every
/// cross-unit edge copy becomes one parallel quotient edge.
pub(crate) struct LocalQuotient {
    pub graph: LocalGraph,
    /// Members of each quotient node (global ids, sorted).
    pub members: Vec<Vec<usize>>,
    /// Unit index (into the level) of each quotient node.
    pub units: Vec<u32>,
}

pub(crate) fn quotient_local(sub: &Subgraph, level: &Level) -> LocalQuotient {
    let graph = sub.graph();
    let mut slot: BTreeMap<u32, usize> = BTreeMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut units = Vec::new();
    for &v in sub.nodes() {
        let u = level.unit_of[v];
        let q = *slot.entry(u).or_insert_with(|| {
            members.push(Vec::new());
            units.push(u);
            members.len() - 1
        });
        members[q].push(v);
    }
    let mut adj = vec![Vec::new(); members.len()];
    for &v in sub.nodes() {
        let qv = slot[&level.unit_of[v]];
        for &(w, e) in graph.neighbors(v) {
            if w <= v || !sub.contains(w) {
                continue;
            }
            let qw = slot[&level.unit_of[w]];
            if qv == qw {
                continue;
            }
            for copy in 0..graph.edge(e).multiplicity {
                let r = crate::graph::EdgeRef { edge: e, copy };
                adj[qv].push((qw as u32, r));
                adj[qw].push((qv as u32, r));
            }
        }
    }
    LocalQuotient {
        graph: LocalGraph { adj },
        members,
        units,
    }
}

/// The quotient multigraph G / ~eta for one level: one node per unit, edge
/// multiplicity equal to the number of original cross-unit edges, no
/// self-loops. Unit populations and numeric attributes are summed.
pub fn quotient(graph: &Graph, level: &Level) -> Graph {
    let q = quotient_local(&Subgraph::whole(graph), level);
    let nodes: Vec<NodeRecord> = q
        .members
        .iter()
        .zip(&q.units)
        .map(|(members, &u)| {
            let mut rec = NodeRecord::new(
                level.unit_names[u as usize].clone(),
                members.iter().map(|&v| graph.pop(v)).sum::<u64>(),
            );
            for &v in members {
                for (name, value) in graph.attrs(v) {
                    *rec.attrs.entry(name.clone()).or_insert(0.0) += value;
                }
            }
            rec
        })
        .collect();
    let mut edges = Vec::new();
    for (a, list) in q.graph.adj.iter().enumerate() {
        for &(b, _) in list {
            if (b as usize) > a {
                edges.push((nodes[a].id.clone(), nodes[b as usize].id.clone()));
            }
        }
    }
    Graph::build(nodes, &edges).expect("quotient of a valid graph is valid")
}

/// log tau_eta of an induced subgraph under nested levels (coarsest first):
/// log tau(H / level_0) + sum over units a of log tau_eta(H cap a; deeper levels).
pub fn log_tau_eta_of(sub: &Subgraph, levels: &[Level]) -> f64 {
    if sub.is_empty() {
        return 0.0;
    }
    let Some((top, rest)) = levels.split_first() else {
        return log_tree_count_of(sub);
    };
    let q = quotient_local(sub, top);
    let mut total = log_tree_count_local(&q.graph);
    for members in q.members {
        if total == f64::NEG_INFINITY {
            break;
        }
        total += log_tau_eta_of(&Subgraph::new(sub.graph(), members), rest);
    }
    total
}

/// log tau_eta(G).
pub fn log_tau_eta(graph: &Graph, labeling: &Labeling) -> f64 {
    log_tau_eta_of(&Subgraph::whole(graph), labeling.levels())
}

/// Sum over districts of log tau_eta(G_i).
pub fn log_tau_eta_plan(graph: &Graph, plan: &Plan, labeling: &Labeling) -> f64 {
    plan.districts()
        .into_iter()
        .map(|nodes| {
            if nodes.is_empty() {
                f64::NEG_INFINITY
            } else {
                log_tau_eta_of(&Subgraph::new(graph, nodes), labeling.levels())
            }
        })
        .sum()
}

//! Uniform spanning trees via Wilson's loop-erased random walk, plus the
//! two-step (hierarchical) sampler that restricts trees to those spanning
//! every administrative unit.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Edge, EdgeRef, Graph, Labeling, Level, LocalGraph, Subgraph, ABSENT};
use crate::rng::StreamRng;
use crate::tree_count::{log_tau_eta_of, log_tree_count_of, quotient_local};

/// A rooted spanning tree over a node set.
///
/// Local indices follow the sorted node list. Every non-root node `v` owns
/// the tree edge `(v, parent(v))`; preorder positions make each subtree a
/// contiguous slice of `order`.
#[derive(Debug, Clone)]
pub struct SpanningTree {
    nodes: Vec<usize>,
    root: u32,
    parent: Vec<u32>,
    parent_edge: Vec<Option<EdgeRef>>,
    order: Vec<u32>,
    position: Vec<u32>,
    size: Vec<u32>,
    subtree_pop: Vec<u64>,
}

/// A tree edge identified by its lower (child) endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeEdge {
    /// Local index of the child endpoint.
    pub child: usize,
    pub child_node: usize,
    pub parent_node: usize,
    pub edge: EdgeRef,
}

impl TreeEdge {
    /// `(min, max)` node pair; the ordering key for ties.
    pub fn key(&self) -> (usize, usize) {
        (
            self.child_node.min(self.parent_node),
            self.child_node.max(self.parent_node),
        )
    }
}

impl SpanningTree {
    /// Builds the rooted structure from undirected local edges.
    pub(crate) fn from_local_edges(
        sub: &Subgraph,
        root: usize,
        edges: &[(u32, u32, EdgeRef)],
    ) -> SpanningTree {
        let k = sub.len();
        debug_assert_eq!(edges.len() + 1, k.max(1));
        let mut adj: Vec<Vec<(u32, EdgeRef)>> = vec![Vec::new(); k];
        for &(a, b, r) in edges {
            adj[a as usize].push((b, r));
            adj[b as usize].push((a, r));
        }
        for list in adj.iter_mut() {
            list.sort_unstable();
        }
        let mut parent = vec![ABSENT; k];
        let mut parent_edge = vec![None; k];
        let mut order = Vec::with_capacity(k);
        let mut visited = vec![false; k];
        let mut stack = vec![root as u32];
        visited[root] = true;
        while let Some(u) = stack.pop() {
            order.push(u);
            for &(w, r) in adj[u as usize].iter().rev() {
                if !visited[w as usize] {
                    visited[w as usize] = true;
                    parent[w as usize] = u;
                    parent_edge[w as usize] = Some(r);
                    stack.push(w);
                }
            }
        }
        assert_eq!(order.len(), k, "edge set does not span the node set");
        let mut position = vec![0u32; k];
        for (i, &v) in order.iter().enumerate() {
            position[v as usize] = i as u32;
        }
        let graph = sub.graph();
        let mut size = vec![1u32; k];
        let mut subtree_pop: Vec<u64> = sub.nodes().iter().map(|&v| graph.pop(v)).collect();
        for &v in order.iter().rev() {
            let p = parent[v as usize];
            if p != ABSENT {
                size[p as usize] += size[v as usize];
                subtree_pop[p as usize] += subtree_pop[v as usize];
            }
        }
        SpanningTree {
            nodes: sub.nodes().to_vec(),
            root: root as u32,
            parent,
            parent_edge,
            order,
            position,
            size,
            subtree_pop,
        }
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.nodes[self.root as usize]
    }

    pub fn total_pop(&self) -> u64 {
        self.subtree_pop[self.root as usize]
    }

    /// Population of the subtree hanging below local node `v` (inclusive).
    pub fn subtree_pop(&self, v: usize) -> u64 {
        self.subtree_pop[v]
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn edges(&self) -> impl Iterator<Item = TreeEdge> + '_ {
        (0..self.nodes.len()).filter_map(move |v| {
            let p = self.parent[v];
            (p != ABSENT).then(|| TreeEdge {
                child: v,
                child_node: self.nodes[v],
                parent_node: self.nodes[p as usize],
                edge: self.parent_edge[v].expect("non-root has a parent edge"),
            })
        })
    }

    /// Global nodes of the subtree below local node `v`.
    pub fn subtree_nodes(&self, v: usize) -> Vec<usize> {
        let start = self.position[v] as usize;
        let end = start + self.size[v] as usize;
        let mut out: Vec<usize> = self.order[start..end]
            .iter()
            .map(|&l| self.nodes[l as usize])
            .collect();
        out.sort_unstable();
        out
    }

    /// Sorted edge copies; identifies the tree independent of its root.
    pub fn canonical_edges(&self) -> Vec<EdgeRef> {
        let mut e: Vec<EdgeRef> = self.parent_edge.iter().flatten().copied().collect();
        e.sort_unstable();
        e
    }
}

/// Wilson's algorithm on an expanded local multigraph. Returns
/// `(child, parent, edge)` triples for every non-root node.
pub(crate) fn wilson_local<R: Rng + ?Sized>(
    lg: &LocalGraph,
    root: usize,
    rng: &mut R,
) -> Vec<(u32, u32, EdgeRef)> {
    let n = lg.len();
    let mut in_tree = vec![false; n];
    let mut next: Vec<(u32, Option<EdgeRef>)> = vec![(ABSENT, None); n];
    in_tree[root] = true;
    for start in 0..n {
        let mut u = start;
        while !in_tree[u] {
            let nbrs = &lg.adj[u];
            let (w, r) = nbrs[rng.random_range(0..nbrs.len())];
            next[u] = (w, Some(r));
            u = w as usize;
        }
        u = start;
        while !in_tree[u] {
            in_tree[u] = true;
            u = next[u].0 as usize;
        }
    }
    (0..n)
        .filter(|&u| u != root)
        .map(|u| (u as u32, next[u].0, next[u].1.expect("walk assigned a step")))
        .collect()
}

/// Uniform spanning tree of the induced subgraph, rooted at a uniformly
/// chosen node. Parallel edges are distinct trees.
pub fn sample_ust(sub: &Subgraph, rng: &mut StreamRng) -> Result<SpanningTree> {
    if sub.is_empty() {
        return Err(Error::InvalidParameter("cannot span an empty node set".into()));
    }
    let lg = sub.local_graph();
    if !lg.is_connected() {
        return Err(Error::Disconnected);
    }
    let root = rng.random_range(0..sub.len());
    let edges = wilson_local(&lg, root, rng);
    Ok(SpanningTree::from_local_edges(sub, root, &edges))
}

fn restricted_edges(
    sub: &Subgraph,
    levels: &[Level],
    rng: &mut StreamRng,
    out: &mut Vec<(usize, usize, EdgeRef)>,
) -> Result<()> {
    let graph = sub.graph();
    let Some((top, rest)) = levels.split_first() else {
        let lg = sub.local_graph();
        if !lg.is_connected() {
            return Err(Error::Disconnected);
        }
        if sub.len() > 1 {
            let root = rng.random_range(0..sub.len());
            for (a, b, r) in wilson_local(&lg, root, rng) {
                out.push((sub.nodes()[a as usize], sub.nodes()[b as usize], r));
            }
        }
        return Ok(());
    };
    let q = quotient_local(sub, top);
    for (members, &unit) in q.members.iter().zip(&q.units) {
        let inner = Subgraph::new(graph, members.clone());
        restricted_edges(&inner, rest, rng, out).map_err(|e| match e {
            Error::Disconnected => Error::DisconnectedUnit {
                unit: top.unit_names[unit as usize].clone(),
                level: top.name.clone(),
            },
            other => other,
        })?;
    }
    if !q.graph.is_connected() {
        return Err(Error::Disconnected);
    }
    if q.graph.len() > 1 {
        let root = rng.random_range(0..q.graph.len());
        for (_, _, r) in wilson_local(&q.graph, root, rng) {
            let e = graph.edge(r.edge);
            out.push((e.u, e.v, r));
        }
    }
    Ok(())
}

/// Uniform draw from the spanning trees of `sub` whose restriction to every
/// unit of every level is itself a spanning tree. Within-unit trees are
/// drawn first (finest level first), then joined by trees on the quotient
/// multigraphs; each quotient edge copy is one original edge.
pub fn sample_hierarchical_ust(
    sub: &Subgraph,
    labeling: &Labeling,
    rng: &mut StreamRng,
) -> Result<SpanningTree> {
    if sub.is_empty() {
        return Err(Error::InvalidParameter("cannot span an empty node set".into()));
    }
    let mut global = Vec::with_capacity(sub.len());
    restricted_edges(sub, labeling.levels(), rng, &mut global)?;
    let root = rng.random_range(0..sub.len());
    let local: Vec<(u32, u32, EdgeRef)> = global
        .into_iter()
        .map(|(a, b, r)| {
            (
                sub.local_index(a).unwrap() as u32,
                sub.local_index(b).unwrap() as u32,
                r,
            )
        })
        .collect();
    Ok(SpanningTree::from_local_edges(sub, root, &local))
}

/// A family of spanning trees together with the counts the importance
/// weights need.
pub trait TreeSampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// Draws uniformly from the family on `sub`.
    fn sample(&self, sub: &Subgraph, rng: &mut StreamRng) -> Result<SpanningTree>;

    /// log of the family size on `sub` (log tau or log tau_eta).
    fn log_count(&self, sub: &Subgraph) -> f64;

    /// Number of edges `e` crossing a cut `(A, B)` such that
    /// `T_A + e + T_B` is in the family for all family trees `T_A`, `T_B`.
    /// `crossing` lists the cut edges with multiplicity.
    fn linking_edges(&self, graph: &Graph, crossing: &[Edge]) -> u64;

    /// Whether the family on `sub` is non-empty.
    fn spans(&self, sub: &Subgraph) -> bool {
        sub.is_connected()
    }
}

/// Plain uniform spanning trees.
#[derive(Debug, Default, Clone, Copy)]
pub struct Wilson;

impl TreeSampler for Wilson {
    fn name(&self) -> &'static str {
        "wilson"
    }

    fn sample(&self, sub: &Subgraph, rng: &mut StreamRng) -> Result<SpanningTree> {
        sample_ust(sub, rng)
    }

    fn log_count(&self, sub: &Subgraph) -> f64 {
        log_tree_count_of(sub)
    }

    fn linking_edges(&self, _graph: &Graph, crossing: &[Edge]) -> u64 {
        crossing.iter().map(|e| e.multiplicity as u64).sum()
    }
}

/// Trees restricted to span every administrative unit.
#[derive(Debug, Clone)]
pub struct Hierarchical {
    labeling: Arc<Labeling>,
}

impl Hierarchical {
    pub fn new(labeling: Arc<Labeling>) -> Self {
        Hierarchical { labeling }
    }

    pub fn labeling(&self) -> &Labeling {
        &self.labeling
    }
}

impl TreeSampler for Hierarchical {
    fn name(&self) -> &'static str {
        "hierarchical"
    }

    fn sample(&self, sub: &Subgraph, rng: &mut StreamRng) -> Result<SpanningTree> {
        sample_hierarchical_ust(sub, &self.labeling, rng)
    }

    fn log_count(&self, sub: &Subgraph) -> f64 {
        log_tau_eta_of(sub, self.labeling.levels())
    }

    fn spans(&self, sub: &Subgraph) -> bool {
        sub.is_connected() && self.log_count(sub).is_finite()
    }

    // A unit is split by the cut iff some cut edge lies inside it. The
    // joining edge must lie inside the split unit of every level, and no
    // level may have two split units.
    fn linking_edges(&self, _graph: &Graph, crossing: &[Edge]) -> u64 {
        let mut split: Vec<Option<u32>> = Vec::with_capacity(self.labeling.levels().len());
        for level in self.labeling.levels() {
            let mut unit = None;
            for e in crossing {
                let (a, b) = (level.unit_of[e.u], level.unit_of[e.v]);
                if a == b {
                    match unit {
                        None => unit = Some(a),
                        Some(u) if u != a => return 0,
                        _ => {}
                    }
                }
            }
            split.push(unit);
        }
        crossing
            .iter()
            .filter(|e| {
                self.labeling
                    .levels()
                    .iter()
                    .zip(&split)
                    .all(|(level, s)| match s {
                        Some(u) => level.unit_of[e.u] == *u && level.unit_of[e.v] == *u,
                        None => true,
                    })
            })
            .map(|e| e.multiplicity as u64)
            .sum()
    }
}

/// Tree-sampler registry: `"wilson"`, or `"hierarchical"` (needs a labeling).
pub fn tree_sampler(name: &str, labeling: Option<Arc<Labeling>>) -> Result<Arc<dyn TreeSampler>> {
    match (name, labeling) {
        ("wilson", _) => Ok(Arc::new(Wilson)),
        ("hierarchical", Some(l)) => Ok(Arc::new(Hierarchical::new(l))),
        ("hierarchical", None) => Err(Error::InvalidParameter(
            "the hierarchical tree sampler needs administrative levels".into(),
        )),
        (other, _) => Err(Error::UnknownStrategy {
            kind: "tree sampler",
            name: other.to_string(),
            available: "wilson, hierarchical".into(),
        }),
    }
}

/// Hierarchical sampler when levels are given, Wilson otherwise.
pub fn default_tree_sampler(labeling: Option<Arc<Labeling>>) -> Arc<dyn TreeSampler> {
    match labeling {
        Some(l) if !l.is_empty() => Arc::new(Hierarchical::new(l)),
        _ => Arc::new(Wilson),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::grid;
    use crate::rng::RngStream;
    use std::collections::HashMap;

    #[test]
    fn single_node_tree() {
        let g = Graph::from_edges(&[4], &[]).unwrap();
        let t = sample_ust(&Subgraph::whole(&g), &mut RngStream::new(1).rng()).unwrap();
        assert_eq!(t.edge_count(), 0);
        assert_eq!(t.total_pop(), 4);
        assert_eq!(t.root(), 0);
    }

    #[test]
    fn disconnected_input_is_rejected() {
        let g = Graph::from_edges(&[1, 1, 1], &[(0, 1)]).unwrap();
        assert!(matches!(
            sample_ust(&Subgraph::whole(&g), &mut RngStream::new(1).rng()),
            Err(Error::Disconnected)
        ));
    }

    #[test]
    fn subtree_pops_match_side_populations() {
        let pops: Vec<u64> = (1..=12).collect();
        let g = grid(3, 4, &pops).build();
        let mut rng = RngStream::new(3).rng();
        for _ in 0..20 {
            let t = sample_ust(&Subgraph::whole(&g), &mut rng).unwrap();
            assert_eq!(t.total_pop(), g.total_pop());
            for e in t.edges() {
                let side = t.subtree_nodes(e.child);
                let pop: u64 = side.iter().map(|&v| g.pop(v)).sum();
                assert_eq!(pop, t.subtree_pop(e.child));
                assert!(side.contains(&e.child_node));
                assert!(!side.contains(&e.parent_node));
            }
        }
    }

    #[test]
    fn double_edge_copies_are_equally_likely() {
        let g = Graph::from_edges(&[1, 1], &[(0, 1), (0, 1)]).unwrap();
        let mut rng = RngStream::new(11).rng();
        let mut first = 0;
        let draws = 20_000;
        for _ in 0..draws {
            let t = sample_ust(&Subgraph::whole(&g), &mut rng).unwrap();
            if t.canonical_edges()[0].copy == 0 {
                first += 1;
            }
        }
        let frac = first as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 4.0 * (0.25f64 / draws as f64).sqrt(), "{frac}");
    }

    #[test]
    fn hierarchical_with_one_unit_matches_plain_support() {
        let g = grid(2, 2, &[1; 4]).with_units("all", |_, _| "a".into()).build();
        let lab = Labeling::from_graph(&g, &["all"]).unwrap();
        let mut rng = RngStream::new(5).rng();
        let mut seen: HashMap<Vec<EdgeRef>, usize> = HashMap::new();
        for _ in 0..4000 {
            let t = sample_hierarchical_ust(&Subgraph::whole(&g), &lab, &mut rng).unwrap();
            *seen.entry(t.canonical_edges()).or_default() += 1;
        }
        assert_eq!(seen.len(), 4);
        for &c in seen.values() {
            assert!((c as f64 - 1000.0).abs() < 150.0, "{c}");
        }
    }

    #[test]
    fn hierarchical_two_by_two_columns() {
        let g = grid(2, 2, &[1; 4]).with_units("col", |_, c| format!("c{c}")).build();
        let lab = Labeling::from_graph(&g, &["col"]).unwrap();
        let mut rng = RngStream::new(9).rng();
        let mut seen: HashMap<Vec<EdgeRef>, usize> = HashMap::new();
        for _ in 0..4000 {
            let t = sample_hierarchical_ust(&Subgraph::whole(&g), &lab, &mut rng).unwrap();
            *seen.entry(t.canonical_edges()).or_default() += 1;
        }
        assert_eq!(seen.len(), 2);
        for &c in seen.values() {
            assert!((c as f64 - 2000.0).abs() < 200.0, "{c}");
        }
    }

    #[test]
    fn hierarchical_cuts_split_at_most_one_unit() {
        let g = grid(4, 4, &[1; 16])
            .with_units("county", |r, c| format!("{}{}", r / 2, c / 2))
            .build();
        let lab = Labeling::from_graph(&g, &["county"]).unwrap();
        let level = &lab.levels()[0];
        let mut rng = RngStream::new(21).rng();
        for _ in 0..200 {
            let t = sample_hierarchical_ust(&Subgraph::whole(&g), &lab, &mut rng).unwrap();
            for e in t.edges() {
                let side = t.subtree_nodes(e.child);
                let mut in_side = vec![false; 16];
                for &v in &side {
                    in_side[v] = true;
                }
                let split = (0..level.unit_count() as u32)
                    .filter(|&u| {
                        let members: Vec<usize> =
                            (0..16).filter(|&v| level.unit_of[v] == u).collect();
                        members.iter().any(|&v| in_side[v]) && members.iter().any(|&v| !in_side[v])
                    })
                    .count();
                assert!(split <= 1);
            }
        }
    }

    #[test]
    fn disconnected_unit_is_named() {
        // unit "x" = {0, 2} is not connected inside the path 0-1-2
        let g = Graph::build(
            vec![
                crate::graph::NodeRecord::new("0", 1).with_unit("u", "x"),
                crate::graph::NodeRecord::new("1", 1).with_unit("u", "y"),
                crate::graph::NodeRecord::new("2", 1).with_unit("u", "x"),
            ],
            &[("0".into(), "1".into()), ("1".into(), "2".into())],
        )
        .unwrap();
        let lab = Labeling::from_graph(&g, &["u"]).unwrap();
        let err = sample_hierarchical_ust(&Subgraph::whole(&g), &lab, &mut RngStream::new(1).rng())
            .unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
    }

    #[test]
    fn registry_resolves_names() {
        assert_eq!(tree_sampler("wilson", None).unwrap().name(), "wilson");
        assert!(tree_sampler("hierarchical", None).is_err());
        assert!(matches!(
            tree_sampler("kruskal", None),
            Err(Error::UnknownStrategy { .. })
        ));
    }
}

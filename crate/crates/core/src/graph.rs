//! Adjacency graphs of geographic units, redistricting plans and
//! administrative labelings.
//!
//! Nodes are addressed by their ingestion index (`usize`). String ids are
//! kept for I/O only; whenever an algorithm needs "the smallest node" it
//! means the smallest index.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One node of the input document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub pop: serde_json::Number,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub units: BTreeMap<String, String>,
}

impl NodeRecord {
    pub fn new(id: impl Into<String>, pop: u64) -> Self {
        NodeRecord {
            id: id.into(),
            pop: pop.into(),
            attrs: BTreeMap::new(),
            units: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: f64) -> Self {
        self.attrs.insert(name.into(), value);
        self
    }

    pub fn with_unit(mut self, level: impl Into<String>, unit: impl Into<String>) -> Self {
        self.units.insert(level.into(), unit.into());
        self
    }
}

/// The on-disk graph document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<(String, String)>,
}

/// An undirected edge `u < v` with its multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub multiplicity: u32,
}

/// One parallel copy of a graph edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeRef {
    pub edge: u32,
    pub copy: u32,
}

#[derive(Debug, Clone)]
pub struct Graph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    pops: Vec<u64>,
    attrs: Vec<BTreeMap<String, f64>>,
    units: Vec<BTreeMap<String, String>>,
    /// `(neighbor, edge index)`, sorted by neighbor.
    adj: Vec<Vec<(usize, u32)>>,
    edges: Vec<Edge>,
    total_pop: u64,
    edge_total: u64,
    connected: bool,
}

fn parse_pop(rec: &NodeRecord) -> Result<u64> {
    if let Some(p) = rec.pop.as_u64() {
        return Ok(p);
    }
    let reason = if rec.pop.as_i64().is_some() {
        "negative populations are not allowed".to_string()
    } else {
        format!("`{}` is not an integer", rec.pop)
    };
    Err(Error::InvalidPopulation {
        id: rec.id.clone(),
        reason,
    })
}

impl Graph {
    /// Validates node and edge records and builds the graph. Repeated
    /// edges accumulate multiplicity.
    pub fn build(nodes: Vec<NodeRecord>, edges: &[(String, String)]) -> Result<Graph> {
        let m = nodes.len();
        let mut index = HashMap::with_capacity(m);
        let mut ids = Vec::with_capacity(m);
        let mut pops = Vec::with_capacity(m);
        let mut attrs = Vec::with_capacity(m);
        let mut units = Vec::with_capacity(m);
        for rec in nodes {
            let pop = parse_pop(&rec)?;
            if index.insert(rec.id.clone(), ids.len()).is_some() {
                return Err(Error::DuplicateNode(rec.id));
            }
            ids.push(rec.id);
            pops.push(pop);
            attrs.push(rec.attrs);
            units.push(rec.units);
        }
        let mut counts: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for (a, b) in edges {
            let ia = *index.get(a).ok_or_else(|| Error::UnknownNode(a.clone()))?;
            let ib = *index.get(b).ok_or_else(|| Error::UnknownNode(b.clone()))?;
            if ia == ib {
                return Err(Error::SelfLoop(a.clone()));
            }
            *counts.entry((ia.min(ib), ia.max(ib))).or_insert(0) += 1;
        }
        Ok(Self::assemble(ids, index, pops, attrs, units, counts))
    }

    /// Builds a graph from index pairs; ids are the decimal indices.
    pub fn from_edges(pops: &[u64], edges: &[(usize, usize)]) -> Result<Graph> {
        let nodes = pops
            .iter()
            .enumerate()
            .map(|(i, &p)| NodeRecord::new(i.to_string(), p))
            .collect();
        let named: Vec<(String, String)> = edges
            .iter()
            .map(|&(a, b)| (a.to_string(), b.to_string()))
            .collect();
        Self::build(nodes, &named)
    }

    fn assemble(
        ids: Vec<String>,
        index: HashMap<String, usize>,
        pops: Vec<u64>,
        attrs: Vec<BTreeMap<String, f64>>,
        units: Vec<BTreeMap<String, String>>,
        counts: BTreeMap<(usize, usize), u32>,
    ) -> Graph {
        let m = ids.len();
        let mut adj = vec![Vec::new(); m];
        let mut edges = Vec::with_capacity(counts.len());
        let mut edge_total = 0u64;
        for (k, ((u, v), mult)) in counts.into_iter().enumerate() {
            adj[u].push((v, k as u32));
            adj[v].push((u, k as u32));
            edge_total += mult as u64;
            edges.push(Edge {
                u,
                v,
                multiplicity: mult,
            });
        }
        for list in adj.iter_mut() {
            list.sort_unstable();
        }
        let total_pop = pops.iter().sum();
        let mut g = Graph {
            ids,
            index,
            pops,
            attrs,
            units,
            adj,
            edges,
            total_pop,
            edge_total,
            connected: false,
        };
        g.connected = g.components().len() <= 1;
        g
    }

    pub fn from_document(doc: GraphDocument) -> Result<Graph> {
        Self::build(doc.nodes, &doc.edges)
    }

    pub fn from_json_str(s: &str) -> Result<Graph> {
        let doc: GraphDocument = serde_json::from_str(s)?;
        Self::from_document(doc)
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Graph> {
        let doc: GraphDocument = serde_json::from_reader(r)?;
        Self::from_document(doc)
    }

    /// The graph as an input document; parallel edges are repeated.
    pub fn to_document(&self) -> GraphDocument {
        let nodes = (0..self.node_count())
            .map(|v| NodeRecord {
                id: self.ids[v].clone(),
                pop: self.pops[v].into(),
                attrs: self.attrs[v].clone(),
                units: self.units[v].clone(),
            })
            .collect();
        let mut edges = Vec::with_capacity(self.edge_total as usize);
        for e in &self.edges {
            for _ in 0..e.multiplicity {
                edges.push((self.ids[e.u].clone(), self.ids[e.v].clone()));
            }
        }
        GraphDocument { nodes, edges }
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn id(&self, v: usize) -> &str {
        &self.ids[v]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn pop(&self, v: usize) -> u64 {
        self.pops[v]
    }

    pub fn pops(&self) -> &[u64] {
        &self.pops
    }

    pub fn total_pop(&self) -> u64 {
        self.total_pop
    }

    pub fn attr(&self, v: usize, name: &str) -> Option<f64> {
        self.attrs[v].get(name).copied()
    }

    pub fn attrs(&self, v: usize) -> &BTreeMap<String, f64> {
        &self.attrs[v]
    }

    pub fn unit(&self, v: usize, level: &str) -> Option<&str> {
        self.units[v].get(level).map(String::as_str)
    }

    /// `(neighbor, edge index)` pairs of `v`.
    pub fn neighbors(&self, v: usize) -> &[(usize, u32)] {
        &self.adj[v]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: u32) -> &Edge {
        &self.edges[e as usize]
    }

    /// Number of edges counting multiplicity, |E(G)|.
    pub fn edge_total(&self) -> u64 {
        self.edge_total
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let m = self.node_count();
        let mut seen = vec![false; m];
        let mut out = Vec::new();
        for s in 0..m {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![s];
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &(w, _) in &self.adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// A total assignment of nodes to districts `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Plan {
    assignment: Vec<u32>,
    n: u32,
}

impl Plan {
    pub fn new(assignment: Vec<u32>, n: u32) -> Result<Plan> {
        if n == 0 {
            return Err(Error::InvalidPlan("a plan needs at least one district".into()));
        }
        if let Some(&bad) = assignment.iter().find(|&&d| d >= n) {
            return Err(Error::InvalidPlan(format!(
                "district index {bad} out of range for n = {n}"
            )));
        }
        Ok(Plan { assignment, n })
    }

    pub fn districts_count(&self) -> usize {
        self.n as usize
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn district_of(&self, v: usize) -> u32 {
        self.assignment[v]
    }

    /// Node lists per district (sorted).
    pub fn districts(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n as usize];
        for (v, &d) in self.assignment.iter().enumerate() {
            out[d as usize].push(v);
        }
        out
    }

    pub fn district_pops(&self, graph: &Graph) -> Vec<u64> {
        let mut out = vec![0u64; self.n as usize];
        for (v, &d) in self.assignment.iter().enumerate() {
            out[d as usize] += graph.pop(v);
        }
        out
    }

    /// Relabels districts in order of their smallest node.
    pub fn canonical(&self) -> Plan {
        let mut map = vec![u32::MAX; self.n as usize];
        let mut next = 0u32;
        let assignment = self
            .assignment
            .iter()
            .map(|&d| {
                if map[d as usize] == u32::MAX {
                    map[d as usize] = next;
                    next += 1;
                }
                map[d as usize]
            })
            .collect();
        Plan {
            assignment,
            n: self.n,
        }
    }

    /// True when every district is non-empty and induces a connected subgraph.
    pub fn is_connected(&self, graph: &Graph) -> bool {
        self.districts()
            .iter()
            .all(|nodes| !nodes.is_empty() && Subgraph::new(graph, nodes.clone()).is_connected())
    }

    /// Number of original edges (with multiplicity) joining districts `a` and `b`.
    pub fn boundary_edges(&self, graph: &Graph, a: u32, b: u32) -> u64 {
        graph
            .edges()
            .iter()
            .filter(|e| {
                let (da, db) = (self.assignment[e.u], self.assignment[e.v]);
                (da == a && db == b) || (da == b && db == a)
            })
            .map(|e| e.multiplicity as u64)
            .sum()
    }

    /// Sorted list of adjacent district pairs `(a, b)`, `a < b`.
    pub fn adjacent_pairs(&self, graph: &Graph) -> Vec<(u32, u32)> {
        let mut pairs: Vec<(u32, u32)> = graph
            .edges()
            .iter()
            .filter_map(|e| {
                let (a, b) = (self.assignment[e.u], self.assignment[e.v]);
                (a != b).then(|| (a.min(b), a.max(b)))
            })
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }
}

/// One level of an administrative hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub name: String,
    pub unit_names: Vec<String>,
    /// Unit index of every node.
    pub unit_of: Vec<u32>,
}

impl Level {
    pub fn unit_count(&self) -> usize {
        self.unit_names.len()
    }
}

/// Nested node labelings, coarsest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    levels: Vec<Level>,
}

impl Labeling {
    /// Reads the `units` of every node for the given level names
    /// (coarsest first) and checks nesting.
    pub fn from_graph(graph: &Graph, level_names: &[impl AsRef<str>]) -> Result<Labeling> {
        let mut levels = Vec::with_capacity(level_names.len());
        for name in level_names {
            let name = name.as_ref();
            let mut lookup: BTreeMap<String, u32> = BTreeMap::new();
            let mut unit_names = Vec::new();
            let mut unit_of = Vec::with_capacity(graph.node_count());
            for v in 0..graph.node_count() {
                let unit = graph.unit(v, name).ok_or_else(|| Error::MissingUnit {
                    node: graph.id(v).to_string(),
                    level: name.to_string(),
                })?;
                let next = unit_names.len() as u32;
                let idx = *lookup.entry(unit.to_string()).or_insert_with(|| {
                    unit_names.push(unit.to_string());
                    next
                });
                unit_of.push(idx);
            }
            levels.push(Level {
                name: name.to_string(),
                unit_names,
                unit_of,
            });
        }
        Self::from_levels(levels)
    }

    pub fn from_levels(levels: Vec<Level>) -> Result<Labeling> {
        for pair in levels.windows(2) {
            let (coarse, fine) = (&pair[0], &pair[1]);
            let mut parent = vec![u32::MAX; fine.unit_count()];
            for (&f, &c) in fine.unit_of.iter().zip(&coarse.unit_of) {
                let slot = &mut parent[f as usize];
                if *slot == u32::MAX {
                    *slot = c;
                } else if *slot != c {
                    return Err(Error::NotNested {
                        unit: fine.unit_names[f as usize].clone(),
                        fine: fine.name.clone(),
                        coarse: coarse.name.clone(),
                    });
                }
            }
        }
        Ok(Labeling { levels })
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Induced subgraph on a node subset, with a local `0..k` numbering in
/// increasing node order.
#[derive(Debug, Clone)]
pub struct Subgraph<'g> {
    graph: &'g Graph,
    nodes: Vec<usize>,
    local: Vec<u32>,
}

pub(crate) const ABSENT: u32 = u32::MAX;

impl<'g> Subgraph<'g> {
    pub fn new(graph: &'g Graph, mut nodes: Vec<usize>) -> Subgraph<'g> {
        nodes.sort_unstable();
        nodes.dedup();
        let mut local = vec![ABSENT; graph.node_count()];
        for (i, &v) in nodes.iter().enumerate() {
            local[v] = i as u32;
        }
        Subgraph {
            graph,
            nodes,
            local,
        }
    }

    pub fn whole(graph: &'g Graph) -> Subgraph<'g> {
        Self::new(graph, (0..graph.node_count()).collect())
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.local[v] != ABSENT
    }

    pub fn local_index(&self, v: usize) -> Option<usize> {
        let l = self.local[v];
        (l != ABSENT).then_some(l as usize)
    }

    pub fn pop(&self) -> u64 {
        self.nodes.iter().map(|&v| self.graph.pop(v)).sum()
    }

    /// Internal edges counting multiplicity.
    pub fn edge_total(&self) -> u64 {
        self.nodes
            .iter()
            .flat_map(|&u| self.graph.neighbors(u).iter().map(move |&(w, e)| (u, w, e)))
            .filter(|&(u, w, _)| u < w && self.contains(w))
            .map(|(_, _, e)| self.graph.edge(e).multiplicity as u64)
            .sum()
    }

    /// Expanded local multigraph; every parallel copy is its own entry.
    pub(crate) fn local_graph(&self) -> LocalGraph {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (i, &u) in self.nodes.iter().enumerate() {
            for &(w, e) in self.graph.neighbors(u) {
                let lw = self.local[w];
                if lw == ABSENT {
                    continue;
                }
                for copy in 0..self.graph.edge(e).multiplicity {
                    adj[i].push((lw, EdgeRef { edge: e, copy }));
                }
            }
        }
        LocalGraph { adj }
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        seen[0] = true;
        let mut stack = vec![self.nodes[0]];
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &(w, _) in self.graph.neighbors(u) {
                let lw = self.local[w];
                if lw != ABSENT && !seen[lw as usize] {
                    seen[lw as usize] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == self.nodes.len()
    }
}

/// A multigraph on `0..len` with expanded parallel edges, each entry tagged
/// with the original edge copy it stands for.
#[derive(Debug, Clone)]
pub(crate) struct LocalGraph {
    pub adj: Vec<Vec<(u32, EdgeRef)>>,
}

impl LocalGraph {
    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.adj.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut stack = vec![0usize];
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &(w, _) in &self.adj[u] {
                let w = w as usize;
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == n
    }
}

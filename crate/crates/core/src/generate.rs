//! Synthetic lattice maps for demos and validation.

use rand::Rng;

use crate::graph::{Graph, NodeRecord};
use crate::rng::RngStream;

/// Builder for a `rows x cols` rook-adjacency lattice. Node `r * cols + c`
/// has id `"{r * cols + c}"`.
pub struct GridBuilder {
    rows: usize,
    cols: usize,
    nodes: Vec<NodeRecord>,
}

pub fn grid(rows: usize, cols: usize, pops: &[u64]) -> GridBuilder {
    assert_eq!(pops.len(), rows * cols, "one population per cell");
    let nodes = pops
        .iter()
        .enumerate()
        .map(|(i, &p)| NodeRecord::new(i.to_string(), p))
        .collect();
    GridBuilder { rows, cols, nodes }
}

impl GridBuilder {
    pub fn with_units(mut self, level: &str, unit: impl Fn(usize, usize) -> String) -> Self {
        for (i, rec) in self.nodes.iter_mut().enumerate() {
            rec.units
                .insert(level.to_string(), unit(i / self.cols, i % self.cols));
        }
        self
    }

    pub fn with_attr(mut self, name: &str, values: &[f64]) -> Self {
        for (rec, &x) in self.nodes.iter_mut().zip(values) {
            rec.attrs.insert(name.to_string(), x);
        }
        self
    }

    pub fn build(self) -> Graph {
        let (rows, cols) = (self.rows, self.cols);
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let v = r * cols + c;
                if c + 1 < cols {
                    edges.push((v.to_string(), (v + 1).to_string()));
                }
                if r + 1 < rows {
                    edges.push((v.to_string(), (v + cols).to_string()));
                }
            }
        }
        Graph::build(self.nodes, &edges).expect("lattice is valid")
    }
}

/// `count` integer populations drawn uniformly from `lo..=hi`.
pub fn random_pops(count: usize, lo: u64, hi: u64, seed: u64) -> Vec<u64> {
    let mut rng = RngStream::new(seed).rng();
    (0..count).map(|_| rng.random_range(lo..=hi)).collect()
}

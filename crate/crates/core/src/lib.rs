//! Sampling of redistricting plans (balanced, connected graph partitions)
//! from spanning-forest-weighted target distributions.
//!
//! The main entry points are [`smc::run_smc`], the sequential Monte Carlo
//! sampler, [`mcmc::run_chain`], a merge-split Markov chain with the same
//! stationary distribution, and [`enumerate::enumerate_partitions`], an
//! exhaustive oracle for small maps. Samplers are also available by name
//! through [`sampler::registry`].

pub mod calibrate;
pub mod config;
pub mod constraint;
pub mod enumerate;
pub mod error;
pub mod generate;
pub mod graph;
pub mod io;
pub mod mcmc;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod smc;
pub mod splitter;
pub mod tree_count;
pub mod ust;

pub use error::{Error, Result};
pub use graph::{Graph, Labeling, Plan, Subgraph};
pub use rng::RngStream;

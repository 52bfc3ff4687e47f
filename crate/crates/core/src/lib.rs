//! Hierarchical uncertainty-gated graph neural network.
//!
//! Node embeddings are refined by uncertainty-weighted attention over one-hop
//! neighbors, pooled into learned communities and a single global node, and
//! the three scales are fused per node with weights that favor the least
//! uncertain source.

pub mod error;
pub mod eval;
pub mod graph;
pub mod math;
pub mod model;
pub mod train;

pub use error::{Error, Result};

//! Undirected graphs, dataset bundles, homophily statistics and the synthetic
//! heterophily generator.

mod bundle;
mod stats;
mod synth;

pub use bundle::{
    default_split, format_float, load_bundle, read_bundle, save_bundle, DatasetBundle, LoadNotes, Meta, Role,
};
pub use stats::{effective_degree, homophily_ratio, homophily_report, two_hop_homophily, HomophilyReport};
pub use synth::{synth_heterophily, SynthSpec};

use crate::error::{Error, Result};

/// Simple undirected graph. Edges are stored once as `(u, v)` with `u < v`,
/// sorted; neighbor lists are sorted and symmetric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from arbitrary pairs. Direction is ignored; self-loops
    /// and repeated pairs are dropped and counted in the second return value.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<(Graph, usize)> {
        let mut edges = Vec::new();
        let mut dropped = 0;
        for (a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::contract(format!("edge ({a}, {b}) out of range for n = {n}")));
            }
            if a == b {
                dropped += 1;
                continue;
            }
            edges.push((a.min(b), a.max(b)));
        }
        let before = edges.len();
        edges.sort_unstable();
        edges.dedup();
        dropped += before - edges.len();
        Ok((Graph::from_sorted_unique(n, edges), dropped))
    }

    pub fn empty(n: usize) -> Graph {
        Graph::from_sorted_unique(n, Vec::new())
    }

    fn from_sorted_unique(n: usize, edges: Vec<(usize, usize)>) -> Graph {
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Graph { n, edges, neighbors }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n && self.neighbors[u].binary_search(&v).is_ok()
    }

    /// Same node set with the given edges removed (indices into `edges()`).
    pub fn without_edges(&self, remove: &[usize]) -> Graph {
        let mut keep = vec![true; self.m()];
        for &k in remove {
            keep[k] = false;
        }
        let edges = self
            .edges
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&e, _)| e)
            .collect();
        Graph::from_sorted_unique(self.n, edges)
    }

    /// Same node set with extra edges; pairs already present are ignored.
    pub fn with_edges(&self, extra: &[(usize, usize)]) -> Result<Graph> {
        let pairs = self.edges.iter().copied().chain(extra.iter().copied());
        Graph::from_pairs(self.n, pairs).map(|(g, _)| g)
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.n {
            return Err(Error::contract("permutation length differs from node count"));
        }
        Graph::from_pairs(self.n, self.edges.iter().map(|&(u, v)| (perm[u], perm[v]))).map(|(g, _)| g)
    }

    /// Flattened neighbor lists: `(offsets, targets)` with node `i`'s
    /// neighbors at `targets[offsets[i]..offsets[i + 1]]`. Each undirected
    /// edge appears twice.
    pub fn csr(&self) -> (Vec<usize>, Vec<usize>) {
        let mut offsets = Vec::with_capacity(self.n + 1);
        let mut targets = Vec::with_capacity(2 * self.m());
        offsets.push(0);
        for list in &self.neighbors {
            targets.extend_from_slice(list);
            offsets.push(targets.len());
        }
        (offsets, targets)
    }
}

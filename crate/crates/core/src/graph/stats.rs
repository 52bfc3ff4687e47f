use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Graph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomophilyReport {
    pub h_one_hop: f64,
    pub h_two_hop: f64,
    /// `degree_histogram[k]` nodes have degree `k`.
    pub degree_histogram: Vec<usize>,
    pub max_degree: usize,
}

/// Fraction of edges whose endpoints share a label.
pub fn homophily_ratio(bundle: &DatasetBundle) -> Result<f64> {
    let labels = bundle.full_labels()?;
    let g = &bundle.graph;
    if g.m() == 0 {
        return Err(Error::contract("homophily of a graph without edges"));
    }
    let same = g.edges().iter().filter(|&&(u, v)| labels[u] == labels[v]).count();
    Ok(same as f64 / g.m() as f64)
}

/// Fraction of ordered two-hop pairs `(i, k)` sharing `i`'s label, where `k`
/// is reachable in two steps and is neither `i` nor a direct neighbor.
pub fn two_hop_homophily(bundle: &DatasetBundle) -> Result<f64> {
    let labels = bundle.full_labels()?;
    let (same, total) = two_hop_counts(&bundle.graph, &labels);
    if total == 0 {
        return Err(Error::contract("graph has no two-hop pairs"));
    }
    Ok(same as f64 / total as f64)
}

fn two_hop_counts(g: &Graph, labels: &[usize]) -> (usize, usize) {
    let n = g.n();
    // stamp[k] == i + 1 marks k as already seen for source i.
    let mut stamp = vec![0usize; n];
    let (mut same, mut total) = (0, 0);
    for i in 0..n {
        let mark = i + 1;
        stamp[i] = mark;
        for &j in g.neighbors(i) {
            stamp[j] = mark;
        }
        for &j in g.neighbors(i) {
            for &k in g.neighbors(j) {
                if stamp[k] != mark {
                    stamp[k] = mark;
                    total += 1;
                    if labels[k] == labels[i] {
                        same += 1;
                    }
                }
            }
        }
    }
    (same, total)
}

pub fn homophily_report(bundle: &DatasetBundle) -> Result<HomophilyReport> {
    let g = &bundle.graph;
    let max_degree = g.max_degree();
    let mut degree_histogram = vec![0; max_degree + 1];
    for i in 0..g.n() {
        degree_histogram[g.degree(i)] += 1;
    }
    Ok(HomophilyReport {
        h_one_hop: homophily_ratio(bundle)?,
        h_two_hop: two_hop_homophily(bundle)?,
        degree_histogram,
        max_degree,
    })
}

/// Participation ratio `1 / Σ_j m_ij²` of each node's attention row.
///
/// `attention` follows the layout of [`Graph::csr`]. Isolated nodes get 0.
pub fn effective_degree(graph: &Graph, attention: &[f64]) -> Result<Vec<f64>> {
    let (offsets, _) = graph.csr();
    if attention.len() != offsets[graph.n()] {
        return Err(Error::contract(format!(
            "expected {} attention weights, got {}",
            offsets[graph.n()],
            attention.len()
        )));
    }
    let mut out = Vec::with_capacity(graph.n());
    for i in 0..graph.n() {
        let row = &attention[offsets[i]..offsets[i + 1]];
        if row.is_empty() {
            out.push(0.0);
            continue;
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&w| w < 0.0) {
            return Err(Error::contract(format!(
                "attention row of node {i} is not a distribution (sum {s})"
            )));
        }
        out.push(1.0 / row.iter().map(|w| w * w).sum::<f64>());
    }
    Ok(out)
}

use serde::{Deserialize, Serialize};

use crate::math::Tensor;

/// Plain values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// Initial per-node uncertainty from the feature-only classifier, when
    /// one was supplied.
    pub u0: Option<Vec<f64>>,
    /// Per local layer, `n × F'`.
    pub h: Vec<Tensor>,
    /// Per local layer, one value per node.
    pub u: Vec<Vec<f64>>,
    /// Per local layer, one weight per edge slot in neighbor-list order.
    pub attention: Vec<Vec<f64>>,
    /// Community id of each node; empty when communities are not used.
    pub assignment: Vec<usize>,
    /// One-hot assignments, `n × M`.
    pub z: Option<Tensor>,
    pub community_h: Option<Tensor>,
    pub community_u: Vec<f64>,
    pub community_sizes: Vec<usize>,
    pub community_empty: Vec<bool>,
    pub global_h: Option<Vec<f64>>,
    pub global_u: Option<f64>,
    /// `n × 3`: weights on (local, community, global).
    pub lambda: Tensor,
    /// `n × C` class probabilities.
    pub probs: Tensor,
    pub temperature: f64,
}

/// One node's line in the JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeExport {
    pub node: usize,
    pub u: f64,
    pub lambda: [f64; 3],
    pub community: Option<usize>,
    pub predicted: usize,
}

impl ModelState {
    pub fn n(&self) -> usize {
        self.probs.rows()
    }

    pub fn u_final(&self) -> &[f64] {
        self.u.last().expect("at least one layer")
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.probs.row_argmax(i)).collect()
    }

    pub fn mean_u_local(&self) -> f64 {
        let u = self.u_final();
        u.iter().sum::<f64>() / u.len().max(1) as f64
    }

    /// Mean uncertainty over non-empty communities.
    pub fn mean_u_comm(&self) -> Option<f64> {
        let live: Vec<f64> = self
            .community_u
            .iter()
            .zip(&self.community_empty)
            .filter(|(_, &e)| !e)
            .map(|(&u, _)| u)
            .collect();
        if live.is_empty() {
            None
        } else {
            Some(live.iter().sum::<f64>() / live.len() as f64)
        }
    }

    pub fn export(&self) -> Vec<NodeExport> {
        let pred = self.predictions();
        let u = self.u_final();
        (0..self.n())
            .map(|i| NodeExport {
                node: i,
                u: u[i],
                lambda: [self.lambda.get(i, 0), self.lambda.get(i, 1), self.lambda.get(i, 2)],
                community: self.assignment.get(i).copied(),
                predicted: pred[i],
            })
            .collect()
    }

    pub fn export_json(&self) -> serde_json::Value {
        serde_json::json!({
            "nodes": self.export(),
            "community_u": self.community_u,
            "community_sizes": self.community_sizes,
            "global_u": self.global_u,
        })
    }
}

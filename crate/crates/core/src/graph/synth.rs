use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Graph, Role};
use crate::error::{Error, Result};
use crate::math::{Rng, Tensor};

/// Parameters of the controlled-heterophily generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub num_classes: usize,
    /// Edges drawn per node; the mean degree ends up near twice this.
    pub degree: usize,
    /// Probability that a drawn neighbor shares the node's class.
    pub p: f64,
    /// Standard deviation of the Gaussian noise added to the class one-hot.
    pub feature_noise: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.n < self.num_classes {
            return Err(Error::contract(format!(
                "need at least one node per class (n = {}, classes = {})",
                self.n, self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::contract(format!("p must lie in [0, 1], got {}", self.p)));
        }
        if self.num_classes == 1 && self.p < 1.0 {
            return Err(Error::contract("a single class cannot produce cross-class edges"));
        }
        if !(self.feature_noise >= 0.0) || !self.feature_noise.is_finite() {
            return Err(Error::contract(format!(
                "feature_noise must be >= 0, got {}",
                self.feature_noise
            )));
        }
        let smallest = self.n / self.num_classes;
        if self.degree == 0 || self.degree >= smallest {
            return Err(Error::contract(format!(
                "degree {} infeasible: must be in [1, {})",
                self.degree, smallest
            )));
        }
        Ok(())
    }
}

/// Balanced labels; each node draws `degree` partners, same-class with
/// probability `p`, otherwise from a uniformly chosen other class. Features
/// are the class one-hot plus Gaussian noise. 20 train nodes per class, the
/// rest split evenly into val and test.
pub fn synth_heterophily(spec: &SynthSpec, rng: &Rng) -> Result<DatasetBundle> {
    spec.validate()?;
    let (n, c) = (spec.n, spec.num_classes);

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    rng.child("labels").shuffle(&mut labels);
    let mut members = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }

    let mut er = rng.child("edges");
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut edges = Vec::with_capacity(n * spec.degree);
    for i in 0..n {
        for _ in 0..spec.degree {
            let class = if c == 1 || er.bernoulli(spec.p) {
                labels[i]
            } else {
                let k = er.below(c - 1);
                if k >= labels[i] {
                    k + 1
                } else {
                    k
                }
            };
            let pool = &members[class];
            // A few retries avoid self-pairs and repeats; a draw that keeps
            // colliding is skipped.
            for _ in 0..64 {
                let j = pool[er.below(pool.len())];
                let key = (i.min(j), i.max(j));
                if j != i && seen.insert(key) {
                    edges.push(key);
                    break;
                }
            }
        }
    }
    let (graph, _) = Graph::from_pairs(n, edges)?;

    let mut fr = rng.child("features");
    let mut features = Tensor::zeros(n, c);
    for i in 0..n {
        for k in 0..c {
            let base = if k == labels[i] { 1.0 } else { 0.0 };
            features.set(i, k, base + spec.feature_noise * fr.normal());
        }
    }

    let mut sr = rng.child("split");
    let mut roles = vec![Role::Unlabeled; n];
    let mut rest = Vec::new();
    for list in &members {
        let mut list = list.clone();
        sr.shuffle(&mut list);
        let k = 20.min(list.len());
        for &i in &list[..k] {
            roles[i] = Role::Train;
        }
        rest.extend_from_slice(&list[k..]);
    }
    rest.sort_unstable();
    sr.shuffle(&mut rest);
    let half = rest.len() / 2;
    for (k, &i) in rest.iter().enumerate() {
        roles[i] = if k < half { Role::Val } else { Role::Test };
    }

    let bundle = DatasetBundle {
        name: format!("synth-n{n}-c{c}-deg{}-p{}", spec.degree, spec.p),
        graph,
        features,
        labels: labels.into_iter().map(Some).collect(),
        roles,
        num_classes: c,
        class_names: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

//! Corrupted copies of a bundle: random edge removal, l2 feature noise and a
//! greedy cross-class edge insertion attack.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DatasetBundle, Role};
use crate::math::Rng;
use crate::model::{forward_on_tape, HyperParams, Mode, ModelInput, ModelParams};
use crate::train::nll_on_tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    DropEdge,
    FeatureNoise,
    /// Greedy insertion of cross-class edges between high-degree nodes.
    /// A cheap stand-in for a meta-gradient structure attack.
    GreedyFlip,
}

impl PerturbKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbKind::DropEdge => "drop_edge",
            PerturbKind::FeatureNoise => "feature_noise",
            PerturbKind::GreedyFlip => "greedy_flip",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop_edge" => Ok(PerturbKind::DropEdge),
            "feature_noise" => Ok(PerturbKind::FeatureNoise),
            "greedy_flip" => Ok(PerturbKind::GreedyFlip),
            _ => Err(Error::config(format!(
                "unknown perturbation {s:?} (drop_edge, feature_noise, greedy_flip)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    /// Edge ratio for the structural kinds, relative norm ε for features.
    pub intensity: f64,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        let x = self.intensity;
        let ok = match self.kind {
            PerturbKind::DropEdge | PerturbKind::GreedyFlip => (0.0..1.0).contains(&x),
            PerturbKind::FeatureNoise => x >= 0.0 && x.is_finite(),
        };
        if !ok {
            return Err(Error::config(format!("{} intensity {x} out of range", self.kind)));
        }
        Ok(())
    }

    fn count(&self, m: usize) -> usize {
        (self.intensity * m as f64).floor() as usize
    }
}

/// A corrupted copy of `bundle`; the original is left alone.
pub fn perturb(bundle: &DatasetBundle, spec: &PerturbSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed).child("perturb");
    let mut out = bundle.clone();
    match spec.kind {
        PerturbKind::DropEdge => {
            let m = bundle.graph.m();
            let k = spec.count(m);
            if k > m {
                return Err(Error::contract(format!("cannot drop {k} of {m} edges")));
            }
            if k > 0 {
                let mut idx: Vec<usize> = (0..m).collect();
                rng.shuffle(&mut idx);
                out.graph = bundle.graph.without_edges(&idx[..k]);
            }
        }
        PerturbKind::FeatureNoise => {
            if spec.intensity > 0.0 {
                let d = bundle.features.cols();
                for i in 0..bundle.n() {
                    let row = out.features.row_mut(i);
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                    let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 || dn == 0.0 {
                        continue;
                    }
                    let s = spec.intensity * norm / dn;
                    for (v, e) in row.iter_mut().zip(&dir) {
                        *v += s * e;
                    }
                }
            }
        }
        PerturbKind::GreedyFlip => {
            let k = spec.count(bundle.graph.m());
            out.graph = greedy_cross_class(bundle, k)?;
        }
    }
    Ok(out)
}

/// Inserts `k` edges one at a time. Each joins the highest-degree labeled
/// node that still has an unlinked partner of another class to the
/// highest-degree such partner (ties to the lower id).
fn greedy_cross_class(bundle: &DatasetBundle, k: usize) -> Result<crate::graph::Graph> {
    let n = bundle.n();
    let mut graph = bundle.graph.clone();
    let labeled: Vec<usize> = (0..n).filter(|&i| bundle.labels[i].is_some()).collect();
    let has_pair = labeled
        .iter()
        .any(|&i| labeled.iter().any(|&j| bundle.labels[i] != bundle.labels[j]));
    if !has_pair {
        return Err(Error::contract("no cross-class node pair exists"));
    }
    let mut degree: Vec<usize> = (0..n).map(|i| graph.degree(i)).collect();
    let mut added = Vec::with_capacity(k);
    for step in 0..k {
        let mut order = labeled.clone();
        order.sort_by(|&a, &b| degree[b].cmp(&degree[a]).then(a.cmp(&b)));
        let mut pick = None;
        'outer: for (x, &u) in order.iter().enumerate() {
            for &v in &order[x + 1..] {
                if bundle.labels[u] != bundle.labels[v] && !graph.has_edge(u, v) {
                    pick = Some((u, v));
                    break 'outer;
                }
            }
        }
        let (u, v) =
            pick.ok_or_else(|| Error::contract(format!("ran out of cross-class pairs after {step} insertions")))?;
        graph = graph.with_edges(&[(u, v)])?;
        degree[u] += 1;
        degree[v] += 1;
        added.push((u, v));
    }
    log::debug!("greedy cross-class insertion added {} edges", added.len());
    Ok(graph)
}

/// Projected gradient ascent on the model's own labeled-node NLL in input
/// space: `steps` l2-normalized steps of size `ε/steps`, each node kept within
/// `ε · ‖x_i‖` of its clean features. Works on the model input, so the
/// result is already row-normalized when the model normalizes.
pub fn feature_pgd(
    bundle: &DatasetBundle,
    params: &ModelParams,
    hyper: &HyperParams,
    eps: f64,
    steps: usize,
) -> Result<ModelInput> {
    if !(eps >= 0.0 && eps.is_finite()) || steps == 0 {
        return Err(Error::config("pgd needs eps >= 0 and at least one step"));
    }
    let clean = ModelInput::new(bundle, hyper);
    let mask: Vec<usize> = (0..bundle.n())
        .filter(|&i| bundle.labels[i].is_some() && bundle.roles[i] != Role::Unlabeled)
        .collect();
    let radius: Vec<f64> = (0..clean.n())
        .map(|i| eps * clean.x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut input = clean.clone();
    if eps == 0.0 {
        return Ok(input);
    }
    let step = 1.0 / steps as f64;
    for _ in 0..steps {
        input.x.requires_grad = true;
        let mut trace = forward_on_tape(&input, params, hyper.ablate, hyper.temp_end, Mode::Eval, None)?;
        let loss = nll_on_tape(&mut trace.tape, trace.probs, &bundle.labels, &mask)?;
        let xv = trace.x;
        let g = trace.tape.backward(loss)?.tensor(xv);
        input.x.requires_grad = false;
        input.x.zero_grad();
        for i in 0..input.n() {
            let gi = g.row(i);
            let gn = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn == 0.0 || radius[i] == 0.0 {
                continue;
            }
            let row = input.x.row_mut(i);
            for (v, gv) in row.iter_mut().zip(gi) {
                *v += step * radius[i] * gv / gn;
            }
            let base = clean.x.row(i);
            let dn = row.iter().zip(base).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dn > radius[i] {
                let s = radius[i] / dn;
                for (v, b) in row.iter_mut().zip(base) {
                    *v = b + (*v - b) * s;
                }
            }
        }
    }
    Ok(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::math::Tensor;

    fn ring(n: usize, extra: usize) -> DatasetBundle {
        let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        for i in 0..extra {
            pairs.push((i, (i + 2) % n));
        }
        let (graph, _) = Graph::from_pairs(n, pairs).unwrap();
        let mut rng = Rng::new(7);
        let features = Tensor::new(n, 4, (0..n * 4).map(|_| rng.uniform()).collect()).unwrap();
        DatasetBundle {
            name: "ring".into(),
            graph,
            features,
            labels: (0..n).map(|i| Some(i % 2)).collect(),
            roles: vec![Role::Train; n],
            num_classes: 2,
            class_names: None,
        }
    }

    fn spec(kind: PerturbKind, intensity: f64) -> PerturbSpec {
        PerturbSpec {
            kind,
            intensity,
            seed: 3,
        }
    }

    #[test]
    fn drop_edge_counts() {
        let b = ring(50, 50);
        assert_eq!(b.graph.m(), 100);
        let p = perturb(&b, &spec(PerturbKind::DropEdge, 0.2)).unwrap();
        assert_eq!(p.graph.m(), 80);
        assert_eq!(p.n(), 50);
        assert_eq!(p.features, b.features);
        assert!(p.graph.edges().iter().all(|&(u, v)| b.graph.has_edge(u, v)));
        assert_eq!(b.graph.m(), 100);
    }

    #[test]
    fn zero_intensity_is_identity() {
        let b = ring(20, 5);
        for kind in [
            PerturbKind::DropEdge,
            PerturbKind::FeatureNoise,
            PerturbKind::GreedyFlip,
        ] {
            let p = perturb(&b, &spec(kind, 0.0)).unwrap();
            assert_eq!(p.graph, b.graph);
            assert_eq!(p.features, b.features);
        }
    }

    #[test]
    fn seeded() {
        let b = ring(40, 10);
        let s = spec(PerturbKind::DropEdge, 0.3);
        assert_eq!(perturb(&b, &s).unwrap().graph, perturb(&b, &s).unwrap().graph);
        let f = spec(PerturbKind::FeatureNoise, 0.05);
        assert_eq!(perturb(&b, &f).unwrap().features, perturb(&b, &f).unwrap().features);
    }

    #[test]
    fn feature_noise_has_exact_relative_norm() {
        let b = ring(30, 0);
        let p = perturb(&b, &spec(PerturbKind::FeatureNoise, 0.05)).unwrap();
        for i in 0..30 {
            let x = b.features.row(i);
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nd = p
                .features
                .row(i)
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!((nd - 0.05 * nx).abs() < 1e-12 * nx.max(1.0));
        }
    }

    #[test]
    fn greedy_flip_links_top_degree_cross_class() {
        // Node 0 has degree 3; node 3 is the best unlinked partner of the
        // other class.
        let (graph, _) = Graph::from_pairs(6, [(0, 1), (0, 2), (0, 4), (1, 2)]).unwrap();
        let b = DatasetBundle {
            name: "g".into(),
            graph,
            features: Tensor::zeros(6, 1),
            labels: vec![Some(0), Some(1), Some(1), Some(1), Some(0), Some(0)],
            roles: vec![Role::Train; 6],
            num_classes: 2,
            class_names: None,
        };
        let p = perturb(&b, &spec(PerturbKind::GreedyFlip, 0.25)).unwrap();
        assert_eq!(p.graph.m(), 5);
        assert!(p.graph.has_edge(0, 3));
    }

    #[test]
    fn greedy_flip_needs_two_classes() {
        let mut b = ring(10, 0);
        b.labels = vec![Some(0); 10];
        let e = perturb(&b, &spec(PerturbKind::GreedyFlip, 0.5)).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
    }

    #[test]
    fn bad_intensity() {
        let b = ring(10, 0);
        assert!(perturb(&b, &spec(PerturbKind::DropEdge, 1.0)).is_err());
        assert!(perturb(&b, &spec(PerturbKind::FeatureNoise, -0.1)).is_err());
        assert!("metattack".parse::<PerturbKind>().is_err());
        assert_eq!("greedy_flip".parse::<PerturbKind>().unwrap(), PerturbKind::GreedyFlip);
    }
}

//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use hugnn::graph::{DatasetBundle, Graph, Role};
use hugnn::math::{softmax_rows, Rng, Tensor};
use hugnn::model::{forward, Ablation, HyperParams, Mode, ModelInput, ModelParams, ModelState, Noise};

/// Erdős–Rényi-style graph with `n` nodes, `c` classes and `d`-dim features.
pub fn random_bundle(rng: &mut Rng, n: usize, c: usize, d: usize, edge_p: f64) -> DatasetBundle {
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.uniform() < edge_p {
                pairs.push((u, v));
            }
        }
    }
    let (graph, _) = Graph::from_pairs(n, pairs).unwrap();
    let labels = (0..n).map(|_| Some(rng.below(c))).collect();
    let features = Tensor::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
    DatasetBundle {
        name: "random".into(),
        graph,
        features,
        labels,
        roles: (0..n)
            .map(|i| match i % 3 {
                0 => Role::Train,
                1 => Role::Val,
                _ => Role::Test,
            })
            .collect(),
        num_classes: c,
        class_names: None,
    }
}

/// The bundle with node `i` renamed `perm[i]`.
pub fn permute_bundle(b: &DatasetBundle, perm: &[usize]) -> DatasetBundle {
    let n = b.n();
    let d = b.features.cols();
    let mut feats = vec![0.0; n * d];
    let mut labels = vec![None; n];
    let mut roles = vec![Role::Unlabeled; n];
    for i in 0..n {
        feats[perm[i] * d..(perm[i] + 1) * d].copy_from_slice(b.features.row(i));
        labels[perm[i]] = b.labels[i];
        roles[perm[i]] = b.roles[i];
    }
    DatasetBundle {
        name: b.name.clone(),
        graph: b.graph.permuted(perm).unwrap(),
        features: Tensor::new(n, d, feats).unwrap(),
        labels,
        roles,
        num_classes: b.num_classes,
        class_names: None,
    }
}

pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for i in 0..t.rows() {
        out.row_mut(perm[i]).copy_from_slice(t.row(i));
    }
    out
}

fn shuffled(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut p);
    p
}

/// Every structural property of one forward pass that does not depend on
/// the parameters being trained. Returns a description of each violation.
pub fn state_violations(bundle: &DatasetBundle, state: &ModelState, ablate: Ablation) -> Vec<String> {
    let mut bad = Vec::new();
    let (offsets, _) = bundle.graph.csr();
    for (l, att) in state.attention.iter().enumerate() {
        for i in 0..bundle.n() {
            let row = &att[offsets[i]..offsets[i + 1]];
            if row.is_empty() {
                continue;
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&w| w < 0.0) {
                bad.push(format!("attention row {i} of layer {l} sums to {s}"));
            }
        }
    }
    for i in 0..state.lambda.rows() {
        let row = state.lambda.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&w| w < 0.0) {
            bad.push(format!("lambda row {i} sums to {s}"));
        }
    }
    if let Some(z) = &state.z {
        for i in 0..z.rows() {
            let row = z.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                bad.push(format!("z row {i} is not one-hot: {row:?}"));
            }
        }
    }
    let in_unit = |x: f64| x > 0.0 && x < 1.0;
    if !ablate.uncertainty {
        for (l, u) in state.u.iter().enumerate() {
            if let Some(x) = u.iter().find(|&&x| !in_unit(x)) {
                bad.push(format!("u = {x} outside (0,1) at layer {l}"));
            }
        }
        for (k, &x) in state.community_u.iter().enumerate() {
            if !state.community_empty.get(k).copied().unwrap_or(false) && !in_unit(x) {
                bad.push(format!("community u = {x} outside (0,1)"));
            }
        }
        if let Some(x) = state.global_u {
            if !in_unit(x) {
                bad.push(format!("global u = {x} outside (0,1)"));
            }
        }
    }
    for i in 0..state.probs.rows() {
        let s: f64 = state.probs.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            bad.push(format!("probability row {i} sums to {s}"));
        }
    }
    bad
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

fn permuted_vec(v: &[f64], perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (i, &x) in v.iter().enumerate() {
        out[perm[i]] = x;
    }
    out
}

/// Equivariance of `h`, `u` and the class probabilities under a node
/// relabeling, in eval mode and in train mode with the noise permuted along.
pub fn equivariance_violations(
    bundle: &DatasetBundle,
    params: &ModelParams,
    hyper: &HyperParams,
    perm: &[usize],
) -> Vec<String> {
    let mut bad = Vec::new();
    let pb = permute_bundle(bundle, perm);
    let input = ModelInput::new(bundle, hyper);
    let pinput = ModelInput::new(&pb, hyper);
    let m = params.communities();
    let noise = Noise::draw(
        &Rng::new(hyper.seed).child("noise"),
        bundle.n(),
        m,
        hyper.hidden_dim,
        hyper.layers,
        hyper.dropout,
    );
    let pnoise = Noise {
        gumbel: permute_rows(&noise.gumbel, perm),
        dropout: noise.dropout.iter().map(|t| permute_rows(t, perm)).collect(),
    };
    let runs = [
        ("eval", Mode::Eval, Mode::Eval),
        ("train", Mode::Train(&noise), Mode::Train(&pnoise)),
    ];
    for (name, mode, pmode) in runs {
        let a = forward(&input, params, hyper.ablate, 0.5, mode).unwrap();
        let b = forward(&pinput, params, hyper.ablate, 0.5, pmode).unwrap();
        for l in 0..a.h.len() {
            if !close(permute_rows(&a.h[l], perm).data(), b.h[l].data(), 1e-9) {
                bad.push(format!("{name}: h of layer {l} not equivariant"));
            }
            if !close(&permuted_vec(&a.u[l], perm), &b.u[l], 1e-9) {
                bad.push(format!("{name}: u of layer {l} not equivariant"));
            }
        }
        if !close(permute_rows(&a.probs, perm).data(), b.probs.data(), 1e-9) {
            bad.push(format!("{name}: probabilities not equivariant"));
        }
    }
    bad
}

/// `softmax(x + c·1)` against `softmax(x)` for a random per-row shift.
pub fn softmax_shift_violation(rng: &mut Rng) -> Option<String> {
    let (r, c) = (1 + rng.below(6), 1 + rng.below(8));
    let x = Tensor::new(r, c, (0..r * c).map(|_| 5.0 * rng.normal()).collect()).unwrap();
    let mut shifted = x.clone();
    for i in 0..r {
        let s = 100.0 * rng.normal();
        shifted.row_mut(i).iter_mut().for_each(|v| *v += s);
    }
    let (a, b) = (softmax_rows(&x), softmax_rows(&shifted));
    (!close(a.data(), b.data(), 1e-12))
        .then(|| format!("softmax moved under a shift: {:?} vs {:?}", a.data(), b.data()))
}

/// One seed of the structural suite: a random graph, random settings and
/// fresh parameters. Returns every violation found.
pub fn structural_case(seed: u64) -> Vec<String> {
    let mut rng = Rng::new(seed).child("structural");
    let n = 6 + rng.below(35);
    let c = 2 + rng.below(3);
    let d = 3 + rng.below(5);
    let bundle = random_bundle(&mut rng, n, c, d, 0.15);
    let ablations = [
        Ablation::NONE,
        Ablation {
            uncertainty: true,
            ..Ablation::NONE
        },
        Ablation {
            community: true,
            ..Ablation::NONE
        },
        Ablation {
            global: true,
            ..Ablation::NONE
        },
    ];
    let hyper = HyperParams {
        hidden_dim: 3 + rng.below(6),
        layers: 1 + rng.below(3),
        communities: Some(2 + rng.below(3)),
        seed,
        ablate: ablations[rng.below(ablations.len())],
        ..HyperParams::default()
    };
    let input = ModelInput::new(&bundle, &hyper);
    let params = ModelParams::init(
        &Rng::new(seed),
        input.x.cols(),
        hyper.hidden_dim,
        hyper.layers,
        hyper.num_communities(n),
        c,
    );
    let mut bad = Vec::new();
    let noise = Noise::draw(
        &Rng::new(seed).child("noise"),
        n,
        params.communities(),
        hyper.hidden_dim,
        hyper.layers,
        hyper.dropout,
    );
    for mode in [Mode::Eval, Mode::Train(&noise)] {
        let state = forward(&input, &params, hyper.ablate, 0.7, mode).unwrap();
        bad.extend(state_violations(&bundle, &state, hyper.ablate));
    }
    let perm = shuffled(&mut rng, n);
    bad.extend(equivariance_violations(&bundle, &params, &hyper, &perm));
    bad.extend(softmax_shift_violation(&mut rng));
    bad.into_iter().map(|m| format!("seed {seed}: {m}")).collect()
}

// Brute-force oracles. Each enumerates from the definition with no shared
// code path.

pub fn oracle_homophily(b: &DatasetBundle) -> (usize, usize) {
    let n = b.n();
    let (mut same, mut total) = (0, 0);
    for u in 0..n {
        for v in u + 1..n {
            if b.graph.has_edge(u, v) {
                total += 1;
                if b.labels[u] == b.labels[v] {
                    same += 1;
                }
            }
        }
    }
    (same, total)
}

pub fn oracle_two_hop(b: &DatasetBundle) -> (usize, usize) {
    let n = b.n();
    let g = &b.graph;
    let (mut same, mut total) = (0, 0);
    for i in 0..n {
        for k in 0..n {
            if k == i || g.has_edge(i, k) {
                continue;
            }
            if (0..n).any(|j| g.has_edge(i, j) && g.has_edge(j, k)) {
                total += 1;
                if b.labels[i] == b.labels[k] {
                    same += 1;
                }
            }
        }
    }
    (same, total)
}

/// Equal-width bins over `[0, 1]`, each `(lo, hi]`, the first also holding 0.
pub fn oracle_ece(probs: &Tensor, labels: &[Option<usize>], mask: &[usize], bins: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..bins {
        let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
        let (mut k, mut conf, mut hit) = (0usize, 0.0, 0usize);
        for &i in mask {
            let row = probs.row(i);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            let p = row[best];
            let inside = (p > lo && p <= hi) || (b == 0 && p == 0.0);
            if inside {
                k += 1;
                conf += p;
                if labels[i] == Some(best) {
                    hit += 1;
                }
            }
        }
        if k > 0 {
            total += (k as f64 / mask.len() as f64) * (hit as f64 / k as f64 - conf / k as f64).abs();
        }
    }
    total
}

/// `attention` laid out by ascending neighbor id, which is the order of
/// the graph's neighbor lists.
pub fn oracle_effective_degree(g: &Graph, attention: &[f64]) -> Vec<f64> {
    let mut pos = 0;
    (0..g.n())
        .map(|i| {
            let mut sq = 0.0;
            for j in 0..g.n() {
                if g.has_edge(i, j) {
                    sq += attention[pos] * attention[pos];
                    pos += 1;
                }
            }
            if sq == 0.0 {
                0.0
            } else {
                1.0 / sq
            }
        })
        .collect()
}

/// Random attention rows: normalized positive weights per neighbor list,
/// some rows made one-hot.
pub fn random_attention(rng: &mut Rng, g: &Graph) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..g.n() {
        let k = g.degree(i);
        let mut w: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
        if k > 0 && rng.uniform() < 0.2 {
            w = vec![0.0; k];
            w[rng.below(k)] = 1.0;
        }
        let s: f64 = w.iter().sum();
        out.extend(w.iter().map(|x| x / s));
    }
    out
}

/// Random probability rows for `n` nodes over `c` classes, with a few
/// exact ties at bin edges.
pub fn random_probs(rng: &mut Rng, n: usize, c: usize) -> Tensor {
    let mut t = Tensor::zeros(n, c);
    for i in 0..n {
        let row = t.row_mut(i);
        if rng.uniform() < 0.15 && c == 2 {
            let edge = (1 + rng.below(14)) as f64 / 15.0;
            let top = edge.max(1.0 - edge);
            row[0] = top;
            row[1] = 1.0 - top;
            continue;
        }
        let w: Vec<f64> = (0..c).map(|_| rng.uniform().powi(3) + 1e-6).collect();
        let s: f64 = w.iter().sum();
        for (r, x) in row.iter_mut().zip(w) {
            *r = x / s;
        }
    }
    t
}

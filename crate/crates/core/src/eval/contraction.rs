//! Fixed-point probe for the uncertainty update.
//!
//! The full-model map takes the last local layer with its input frozen, gates
//! the attention with a candidate uncertainty vector, and maps the resulting
//! embeddings back to uncertainties. The reference map is plain neighbor
//! averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DatasetBundle, Graph};
use crate::math::{matmul, Rng, Tape, Tensor};
use crate::model::{
    aggregate, forward, neighbor_attention, neighbor_spread, Adjacency, HyperParams, Mix, Mode, ModelInput,
    ModelParams, UncertaintyMap,
};

/// A step below this counts as converged.
pub const CONVERGED_STEP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    Full,
    /// `u ← D⁻¹(A [+ I]) u`.
    Reference {
        self_loops: bool,
    },
}

#[derive(Debug, Clone)]
pub enum ProbeMap {
    Full {
        adj: Adjacency,
        th: Tensor,
        att: Tensor,
        fu_w: Tensor,
        fu_b: Tensor,
        mix: Mix,
    },
    Reference {
        graph: Graph,
        self_loops: bool,
    },
}

impl ProbeMap {
    /// The last layer of `params`, its input taken from an evaluation pass.
    pub fn full(input: &ModelInput, params: &ModelParams, hyper: &HyperParams) -> Result<Self> {
        let layers = params.layers();
        let h_prev = if layers == 1 {
            input.x.clone()
        } else {
            let state = forward(input, params, hyper.ablate, hyper.temp_end, Mode::Eval)?;
            state.h[layers - 2].clone()
        };
        Ok(ProbeMap::Full {
            adj: input.adj.clone(),
            th: matmul(&h_prev, &params.w_o[layers - 1].detached())?,
            att: params.att[layers - 1].detached(),
            fu_w: params.fu_w.detached(),
            fu_b: params.fu_b.detached(),
            mix: input.mix,
        })
    }

    pub fn reference(graph: &Graph, self_loops: bool) -> Self {
        ProbeMap::Reference {
            graph: graph.clone(),
            self_loops,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            ProbeMap::Full { adj, .. } => adj.n,
            ProbeMap::Reference { graph, .. } => graph.n(),
        }
    }

    pub fn mode(&self) -> ProbeMode {
        match self {
            ProbeMap::Full { .. } => ProbeMode::Full,
            ProbeMap::Reference { self_loops, .. } => ProbeMode::Reference {
                self_loops: *self_loops,
            },
        }
    }

    /// One application of the map.
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.n() {
            return Err(Error::contract(format!(
                "probe vector has {} entries, graph has {}",
                u.len(),
                self.n()
            )));
        }
        match self {
            ProbeMap::Full {
                adj,
                th,
                att,
                fu_w,
                fu_b,
                mix,
            } => {
                let mut tape = Tape::new();
                let th = tape.constant(th.clone());
                let att = tape.constant(att.clone());
                let fu = UncertaintyMap {
                    w: tape.constant(fu_w.clone()),
                    b: tape.constant(fu_b.clone()),
                };
                let uv = tape.constant(Tensor::column(u));
                let m = neighbor_attention(&mut tape, adj, th, att, Some(uv))?;
                let th_src = tape.gather_rows(th, adj.src.clone())?;
                let (_, _, _, h) = aggregate(&mut tape, adj, th, th_src, m, *mix)?;
                let s = neighbor_spread(&mut tape, adj, h)?;
                let out = fu.apply(&mut tape, s)?;
                Ok(tape.value(out).data().to_vec())
            }
            ProbeMap::Reference { graph, self_loops } => Ok((0..graph.n())
                .map(|i| {
                    let nb = graph.neighbors(i);
                    // An isolated node without a self-loop keeps its value.
                    if nb.is_empty() {
                        return u[i];
                    }
                    let mut sum: f64 = nb.iter().map(|&j| u[j]).sum();
                    let mut k = nb.len();
                    if *self_loops {
                        sum += u[i];
                        k += 1;
                    }
                    sum / k as f64
                })
                .collect()),
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `‖F(u) − F(v)‖∞ / ‖u − v‖∞`; `None` when `u = v`.
pub fn lipschitz_ratio(map: &ProbeMap, u: &[f64], v: &[f64]) -> Result<Option<f64>> {
    let den = max_abs_diff(u, v);
    if den == 0.0 {
        return Ok(None);
    }
    Ok(Some(max_abs_diff(&map.apply(u)?, &map.apply(v)?) / den))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrial {
    /// `‖U⁽ᵗ⁺¹⁾ − U⁽ᵗ⁾‖∞` for every iteration run.
    pub steps: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Ratio for one random pair drawn for this trial.
    pub lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub mode: ProbeMode,
    pub max_iters: usize,
    pub tolerance: f64,
    pub trials: Vec<ProbeTrial>,
    /// Every trial converged.
    pub converged: bool,
    pub max_lipschitz: f64,
}

/// Iterates `U ← F(U)` from `trials` random starts in `[0,1]ⁿ`, stopping a
/// trial once a step falls below [`CONVERGED_STEP`].
pub fn contraction_probe(map: &ProbeMap, trials: usize, iters: usize, seed: u64) -> Result<ContractionReport> {
    let n = map.n();
    let root = Rng::new(seed).child("probe");
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = root.child_indexed("trial", t as u64);
        let mut u: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let lipschitz = lipschitz_ratio(map, &u, &v)?.unwrap_or(0.0);
        let mut steps = Vec::new();
        for _ in 0..iters {
            let next = map.apply(&u)?;
            let step = max_abs_diff(&next, &u);
            u = next;
            steps.push(step);
            if step < CONVERGED_STEP {
                break;
            }
        }
        let converged = steps.last().is_some_and(|&s| s < CONVERGED_STEP);
        out.push(ProbeTrial {
            iterations: steps.len(),
            steps,
            converged,
            lipschitz,
        });
    }
    Ok(ContractionReport {
        mode: map.mode(),
        max_iters: iters,
        tolerance: CONVERGED_STEP,
        converged: out.iter().all(|t| t.converged),
        max_lipschitz: out.iter().map(|t| t.lipschitz).fold(0.0, f64::max),
        trials: out,
    })
}

/// The full-model probe on `bundle` with `params`.
pub fn probe_model(
    bundle: &DatasetBundle,
    params: &ModelParams,
    hyper: &HyperParams,
    trials: usize,
    iters: usize,
) -> Result<ContractionReport> {
    let input = ModelInput::new(bundle, hyper);
    let map = ProbeMap::full(&input, params, hyper)?;
    contraction_probe(&map, trials, iters, hyper.seed)
}

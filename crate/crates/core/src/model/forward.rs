use super::layers::{
    assign_communities, fuse_and_classify, global_integrate, local_layer, pool_communities, UncertaintyMap,
};
use super::{Ablation, ModelInput, ModelParams, ModelState};
use crate::error::{Error, Result};
use crate::math::{gumbel_noise, FrozenAssignment, Rng, Tape, Tensor, Var};

/// Random draws of one training step, fixed up front so a step can be
/// replayed exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// `n × M` Gumbel noise for the community sample.
    pub gumbel: Tensor,
    /// One inverted-dropout mask (`0` or `1/(1−rate)`) per gap between local
    /// layers, each `n × F'`.
    pub dropout: Vec<Tensor>,
}

impl Noise {
    pub fn draw(rng: &Rng, n: usize, communities: usize, hidden: usize, layers: usize, rate: f64) -> Noise {
        let gumbel = gumbel_noise(&mut rng.child("gumbel"), n, communities);
        let mut dr = rng.child("dropout");
        let keep = 1.0 - rate;
        let dropout = (1..layers)
            .map(|_| {
                let data = (0..n * hidden)
                    .map(|_| {
                        if rate > 0.0 && dr.uniform() < rate {
                            0.0
                        } else {
                            1.0 / keep
                        }
                    })
                    .collect();
                Tensor::new(n, hidden, data).expect("shape")
            })
            .collect();
        Noise { gumbel, dropout }
    }

    /// The draws for a relabeled graph: row `i` moves to row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Noise {
        let move_rows = |t: &Tensor| {
            let mut out = Tensor::zeros(t.rows(), t.cols());
            for (i, &p) in perm.iter().enumerate() {
                out.row_mut(p).copy_from_slice(t.row(i));
            }
            out
        };
        Noise {
            gumbel: move_rows(&self.gumbel),
            dropout: self.dropout.iter().map(move_rows).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// No dropout; communities by noiseless argmax.
    Eval,
    Train(&'a Noise),
}

/// A recorded forward pass, ready for a loss and [`Tape::backward`].
#[derive(Debug)]
pub struct Trace {
    pub tape: Tape,
    /// Tape leaves of the parameters, in [`ModelParams::names`] order.
    pub leaves: Vec<Var>,
    /// `n × C` class probabilities.
    pub probs: Var,
    /// `n × 1` uncertainty of the last local layer.
    pub u_final: Var,
    /// Relaxed community sample, when communities are used.
    pub soft_assign: Option<Var>,
    /// The input features; a differentiable leaf when `input.x.requires_grad`.
    pub x: Var,
    pub state: ModelState,
}

pub fn forward_on_tape(
    input: &ModelInput,
    params: &ModelParams,
    ablate: Ablation,
    temperature: f64,
    mode: Mode<'_>,
    frozen: Option<&FrozenAssignment>,
) -> Result<Trace> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params
        .tensors()
        .into_iter()
        .map(|t| {
            if t.requires_grad {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let layers = params.layers();
    let w_o = |l: usize| leaves[2 * l];
    let att = |l: usize| leaves[2 * l + 1];
    let rest = &leaves[2 * layers..];
    let (w_m, w_c, w_g, w_f, a_fuse) = (rest[0], rest[1], rest[2], rest[3], rest[4]);
    let fu = UncertaintyMap { w: rest[5], b: rest[6] };

    if let Mode::Train(noise) = mode {
        if noise.dropout.len() + 1 != layers {
            return Err(Error::contract("one dropout mask per gap between local layers"));
        }
    }

    let x = if input.x.requires_grad {
        tape.param(&input.x)
    } else {
        tape.constant(input.x.clone())
    };
    let mut h = x;
    let mut hs = Vec::with_capacity(layers);
    let mut us = Vec::with_capacity(layers);
    let mut atts = Vec::with_capacity(layers);
    let mut u_last = None;
    for l in 0..layers {
        let out = local_layer(
            &mut tape,
            &input.adj,
            h,
            w_o(l),
            att(l),
            &fu,
            ablate.uncertainty,
            input.mix,
        )?;
        hs.push(tape.value(out.h).clone());
        us.push(tape.value(out.u).data().to_vec());
        atts.push(tape.value(out.m).data().to_vec());
        h = out.h;
        u_last = Some(out.u);
        if l + 1 < layers {
            if let Mode::Train(noise) = mode {
                let mask = tape.constant(noise.dropout[l].clone());
                h = tape.mul(h, mask)?;
            }
        }
    }
    let u = u_last.expect("layers >= 1");

    let mut state = ModelState {
        u0: None,
        h: hs,
        u: us,
        attention: atts,
        assignment: Vec::new(),
        z: None,
        community_h: None,
        community_u: Vec::new(),
        community_sizes: Vec::new(),
        community_empty: Vec::new(),
        global_h: None,
        global_u: None,
        lambda: Tensor::zeros(0, 3),
        probs: Tensor::zeros(0, 0),
        temperature,
    };

    let mut soft_assign = None;
    let mut community = None;
    let mut global = None;
    if !ablate.flat() {
        let noise = match mode {
            Mode::Train(n) => Some(&n.gumbel),
            Mode::Eval => None,
        };
        let (sample, _) = assign_communities(&mut tape, h, w_m, temperature, noise, frozen)?;
        let pooled = pool_communities(&mut tape, h, sample.z, &sample.hard, w_c, &fu)?;
        state.assignment = (0..sample.hard.rows()).map(|i| sample.hard.row_argmax(i)).collect();
        state.z = Some(sample.hard.clone());
        state.community_h = Some(tape.value(pooled.h_c).clone());
        state.community_u = tape.value(pooled.u_c).data().to_vec();
        state.community_sizes = pooled.sizes.clone();
        state.community_empty = pooled.empty.clone();
        soft_assign = Some(sample.soft);
        if !ablate.community {
            community = Some((sample.z, pooled.h_c, pooled.u_c));
        }
        if !ablate.global {
            let g = global_integrate(&mut tape, pooled.h_c, &pooled.empty, w_g, &fu)?;
            state.global_h = Some(tape.value(g.h_g).data().to_vec());
            state.global_u = Some(tape.value(g.u_g).item());
            global = Some((g.h_g, g.u_g));
        }
    }

    let fusion = fuse_and_classify(&mut tape, h, u, community, global, a_fuse, w_f, ablate.uncertainty)?;
    state.lambda = fusion.lambda3;
    state.probs = tape.value(fusion.probs).clone();
    if !state.probs.is_finite() {
        return Err(Error::NonFinite("class probabilities".into()));
    }
    Ok(Trace {
        tape,
        leaves,
        probs: fusion.probs,
        u_final: u,
        soft_assign,
        x,
        state,
    })
}

/// Forward pass returning plain values only.
pub fn forward(
    input: &ModelInput,
    params: &ModelParams,
    ablate: Ablation,
    temperature: f64,
    mode: Mode<'_>,
) -> Result<ModelState> {
    forward_on_tape(input, params, ablate, temperature, mode, None).map(|t| t.state)
}

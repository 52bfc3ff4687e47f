//! The four stages of the forward pass, each recorded on a [`Tape`].

use std::sync::Arc;

use super::Mix;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::math::{gumbel_softmax_st, FrozenAssignment, Segments, StSample, Tape, Tensor, Var};

/// Directed edge slots grouped by destination: slot `e` carries a message
/// from `src[e]` to `dst[e]`; node `i` owns slots `seg.range(i)`, whose
/// sources are its sorted neighbors. Every undirected edge gives two slots.
#[derive(Debug, Clone)]
pub struct Adjacency {
    pub n: usize,
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    pub seg: Arc<Segments>,
}

impl Adjacency {
    pub fn new(graph: &Graph) -> Self {
        let (offsets, targets) = graph.csr();
        let mut dst = Vec::with_capacity(targets.len());
        for i in 0..graph.n() {
            dst.extend(std::iter::repeat(i).take(offsets[i + 1] - offsets[i]));
        }
        Adjacency {
            n: graph.n(),
            src: Arc::new(targets),
            dst: Arc::new(dst),
            seg: Arc::new(Segments::from_offsets(offsets).expect("csr offsets")),
        }
    }

    pub fn slots(&self) -> usize {
        self.src.len()
    }
}

/// `u = sigmoid(w · s + b)` applied to a column of mean squared deviations.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintyMap {
    pub w: Var,
    pub b: Var,
}

impl UncertaintyMap {
    pub fn apply(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        let ws = tape.mul(s, self.w)?;
        let z = tape.add(ws, self.b)?;
        Ok(tape.sigmoid(z))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LocalOut {
    /// Projected input `h_in · W_O`.
    pub th: Var,
    pub h: Var,
    /// Per-node uncertainty, `n × 1`.
    pub u: Var,
    /// Attention per edge slot, `slots × 1`.
    pub m: Var,
    pub l: Var,
    pub d: Var,
    pub p: Var,
}

/// One uncertainty-gated message-passing layer.
///
/// The node's uncertainty is computed first, from the mean squared distance
/// between its projection and its neighbors'. Attention logits are
/// `a_selfᵀ th_i + a_nbrᵀ th_j − u_j` (the `−u_j` term is dropped when
/// `ablate_uncertainty`), normalized over the neighborhood. The aggregate
/// `l_i` and the residual `d_i = th_i − l_i` are mixed by their cosine
/// `p_i`: `h_i = ReLU(th_i + p_i l_i + (1 − p_i) d_i)`.
pub fn local_layer(
    tape: &mut Tape,
    adj: &Adjacency,
    h_in: Var,
    w_o: Var,
    att: Var,
    fu: &UncertaintyMap,
    ablate_uncertainty: bool,
    mix: Mix,
) -> Result<LocalOut> {
    let th = tape.matmul(h_in, w_o)?;
    let th_dst = tape.gather_rows(th, adj.dst.clone())?;
    let th_src = tape.gather_rows(th, adj.src.clone())?;

    let diff = tape.sub(th_dst, th_src)?;
    let sq = tape.sq_norm_rows(diff);
    let spread = tape.segment_mean(sq, adj.seg.clone())?;
    let u = fu.apply(tape, spread)?;

    let gate = if ablate_uncertainty { None } else { Some(u) };
    let m = neighbor_attention(tape, adj, th, att, gate)?;
    let (l, d, p, h) = aggregate(tape, adj, th, th_src, m, mix)?;
    Ok(LocalOut { th, h, u, m, l, d, p })
}

/// Mean squared distance from each node to its neighbors, `n × 1`; zero for
/// isolated nodes.
pub fn neighbor_spread(tape: &mut Tape, adj: &Adjacency, h: Var) -> Result<Var> {
    let dst = tape.gather_rows(h, adj.dst.clone())?;
    let src = tape.gather_rows(h, adj.src.clone())?;
    let diff = tape.sub(dst, src)?;
    let sq = tape.sq_norm_rows(diff);
    tape.segment_mean(sq, adj.seg.clone())
}

/// Attention-weighted aggregate `l`, residual `d`, their cosine `p` and the
/// layer output `h` under `mix`. `th_src` is `th` gathered at the edge sources.
pub fn aggregate(
    tape: &mut Tape,
    adj: &Adjacency,
    th: Var,
    th_src: Var,
    m: Var,
    mix: Mix,
) -> Result<(Var, Var, Var, Var)> {
    let msg = tape.mul(th_src, m)?;
    let l = tape.segment_sum(msg, adj.seg.clone())?;
    let d = tape.sub(th, l)?;
    let p = tape.cosine_rows(th, l)?;
    let pl = tape.mul(l, p)?;
    let neg_p = tape.neg(p);
    let q = tape.offset(neg_p, 1.0);
    let qd = tape.mul(d, q)?;
    let s = match mix {
        Mix::Cosine => {
            let s = tape.add(th, pl)?;
            tape.add(s, qd)?
        }
        Mix::LowPass => tape.add(th, l)?,
    };
    let h = tape.relu(s);
    Ok((l, d, p, h))
}

/// Attention over each neighborhood: `softmax_j(a_selfᵀ th_i + a_nbrᵀ th_j − u_j)`,
/// one weight per edge slot. Without `u` the gate is left out.
pub fn neighbor_attention(tape: &mut Tape, adj: &Adjacency, th: Var, att: Var, u: Option<Var>) -> Result<Var> {
    let f = tape.shape(th).1;
    let a_self = tape.slice_rows(att, 0, f)?;
    let a_nbr = tape.slice_rows(att, f, f)?;
    let s_self = tape.matmul(th, a_self)?;
    let s_nbr = tape.matmul(th, a_nbr)?;
    let e_self = tape.gather_rows(s_self, adj.dst.clone())?;
    let e_nbr = tape.gather_rows(s_nbr, adj.src.clone())?;
    let mut e = tape.add(e_self, e_nbr)?;
    if let Some(u) = u {
        let u_src = tape.gather_rows(u, adj.src.clone())?;
        e = tape.sub(e, u_src)?;
    }
    tape.segment_softmax(e, adj.seg.clone())
}

/// Community scores `softmax(h · W_M)` and a straight-through Gumbel sample.
/// `noise = None` gives the noiseless argmax used at evaluation.
pub fn assign_communities(
    tape: &mut Tape,
    h: Var,
    w_m: Var,
    temperature: f64,
    noise: Option<&Tensor>,
    frozen: Option<&FrozenAssignment>,
) -> Result<(StSample, Var)> {
    let scores = tape.matmul(h, w_m)?;
    let probs = tape.row_softmax(scores);
    let sample = gumbel_softmax_st(tape, probs, temperature, noise, frozen)?;
    Ok((sample, probs))
}

#[derive(Debug, Clone)]
pub struct Pooled {
    /// `M × F'`; zero rows for empty communities.
    pub h_c: Var,
    /// `M × 1`; exactly 1 for empty communities.
    pub u_c: Var,
    pub sizes: Vec<usize>,
    pub empty: Vec<bool>,
}

/// Mean of the members' `h · W_C` per community, and the uncertainty of
/// each community from its members' mean squared distance to that mean.
pub fn pool_communities(
    tape: &mut Tape,
    h: Var,
    z: Var,
    hard: &Tensor,
    w_c: Var,
    fu: &UncertaintyMap,
) -> Result<Pooled> {
    let (n, m) = hard.shape();
    let mut sizes = vec![0usize; m];
    for i in 0..n {
        sizes[hard.row_argmax(i)] += 1;
    }
    let empty: Vec<bool> = sizes.iter().map(|&s| s == 0).collect();
    let pad = Tensor::column(&empty.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    let keep = Tensor::column(&empty.iter().map(|&e| if e { 0.0 } else { 1.0 }).collect::<Vec<_>>());
    let pad = tape.constant(pad);
    let keep = tape.constant(keep);

    let zt = tape.transpose(z);
    let counts = tape.col_sum(z);
    let counts = tape.transpose(counts);
    // Empty communities divide by 1 instead of 0; their sums are 0 anyway.
    let denom = tape.add(counts, pad)?;

    let proj = tape.matmul(h, w_c)?;
    let sums = tape.matmul(zt, proj)?;
    let h_c = tape.div(sums, denom)?;

    let back = tape.matmul(z, h_c)?;
    let dev = tape.sub(h, back)?;
    let sq = tape.sq_norm_rows(dev);
    let sq_sum = tape.matmul(zt, sq)?;
    let spread = tape.div(sq_sum, denom)?;
    let u_raw = fu.apply(tape, spread)?;
    let u_kept = tape.mul(u_raw, keep)?;
    let u_c = tape.add(u_kept, pad)?;
    Ok(Pooled { h_c, u_c, sizes, empty })
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalOut {
    /// `1 × F'`.
    pub h_g: Var,
    /// `1 × 1`.
    pub u_g: Var,
}

/// Global node: mean of `h_C · W_G` over non-empty communities, with the
/// uncertainty of the communities' spread around it.
pub fn global_integrate(tape: &mut Tape, h_c: Var, empty: &[bool], w_g: Var, fu: &UncertaintyMap) -> Result<GlobalOut> {
    let live = empty.iter().filter(|&&e| !e).count();
    if live == 0 {
        return Err(Error::contract("global node needs at least one non-empty community"));
    }
    let mask: Vec<f64> = empty.iter().map(|&e| if e { 0.0 } else { 1.0 }).collect();
    let mask = tape.constant(Tensor::new(1, empty.len(), mask)?);
    let inv = 1.0 / live as f64;

    let pooled = tape.matmul(mask, h_c)?;
    let pooled = tape.matmul(pooled, w_g)?;
    let h_g = tape.scale(pooled, inv);

    let dev = tape.sub(h_c, h_g)?;
    let sq = tape.sq_norm_rows(dev);
    let total = tape.matmul(mask, sq)?;
    let spread = tape.scale(total, inv);
    let u_g = fu.apply(tape, spread)?;
    Ok(GlobalOut { h_g, u_g })
}

#[derive(Debug, Clone)]
pub struct Fusion {
    /// Weights over the present candidates, `n × k`.
    pub lambda: Var,
    /// Weights laid out as `(local, community, global)` with zeros for
    /// absent candidates.
    pub lambda3: Tensor,
    pub h_final: Var,
    pub probs: Var,
}

/// Per-node mixture of the node's own embedding, its community's and the
/// global node's, weighted by `softmax(α_v − u_v)` with
/// `α_v = a_fuse,1ᵀ h_i + a_fuse,2ᵀ h_v`, followed by the softmax classifier.
///
/// `community` is `(z, h_C, u_C)`; `global` is `(h_G, u_G)`. Absent
/// candidates are left out of the normalization.
pub fn fuse_and_classify(
    tape: &mut Tape,
    h: Var,
    u: Var,
    community: Option<(Var, Var, Var)>,
    global: Option<(Var, Var)>,
    a_fuse: Var,
    w_f: Var,
    ablate_uncertainty: bool,
) -> Result<Fusion> {
    let (n, f) = tape.shape(h);
    let a_self = tape.slice_rows(a_fuse, 0, f)?;
    let a_other = tape.slice_rows(a_fuse, f, f)?;
    let base = tape.matmul(h, a_self)?;

    let mut cands: Vec<(Var, Var, usize)> = Vec::new();
    let mut logits = Vec::new();
    let mut push = |tape: &mut Tape, hv: Var, uv: Var, slot: usize, cands: &mut Vec<(Var, Var, usize)>| -> Result<()> {
        let s = tape.matmul(hv, a_other)?;
        let mut alpha = tape.add(base, s)?;
        if !ablate_uncertainty {
            alpha = tape.sub(alpha, uv)?;
        }
        logits.push(alpha);
        cands.push((hv, uv, slot));
        Ok(())
    };
    push(tape, h, u, 0, &mut cands)?;
    if let Some((z, h_c, u_c)) = community {
        let hv = tape.matmul(z, h_c)?;
        let uv = tape.matmul(z, u_c)?;
        push(tape, hv, uv, 1, &mut cands)?;
    }
    if let Some((h_g, u_g)) = global {
        push(tape, h_g, u_g, 2, &mut cands)?;
    }
    let stacked = tape.concat_cols(&logits)?;
    let lambda = tape.row_softmax(stacked);

    let mut h_final: Option<Var> = None;
    for (k, &(hv, _, _)) in cands.iter().enumerate() {
        let w = tape.slice_cols(lambda, k, 1)?;
        let term = if tape.shape(hv).0 == n {
            tape.mul(hv, w)?
        } else {
            tape.matmul(w, hv)?
        };
        h_final = Some(match h_final {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let h_final = h_final.expect("local candidate is always present");
    let logits = tape.matmul(h_final, w_f)?;
    let probs = tape.row_softmax(logits);

    let lv = tape.value(lambda);
    let mut lambda3 = Tensor::zeros(n, 3);
    for i in 0..n {
        for (k, &(_, _, slot)) in cands.iter().enumerate() {
            lambda3.set(i, slot, lv.get(i, k));
        }
    }
    Ok(Fusion {
        lambda,
        lambda3,
        h_final,
        probs,
    })
}

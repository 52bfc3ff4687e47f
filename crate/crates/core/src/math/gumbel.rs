//! Gumbel-Softmax sampling with a straight-through one-hot output.

use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::{argmax, Tensor};
use crate::error::{Error, Result};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct StSample {
    /// Relaxed sample, rows sum to 1.
    pub soft: Var,
    /// One-hot rows (plain values, no gradient).
    pub hard: Tensor,
    /// Forward value `hard`, backward through `soft`.
    pub z: Var,
}

/// Forward value and straight-through reference supplied by the caller in
/// place of the sampled ones. Used by finite-difference checks, which need the
/// discrete choice held fixed while parameters move.
#[derive(Debug, Clone)]
pub struct FrozenAssignment {
    pub hard: Tensor,
    pub soft_reference: Tensor,
}

pub fn gumbel_noise(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gumbel()).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

fn one_hot_argmax(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        let k = argmax(t.row(r));
        out.set(r, k, 1.0);
    }
    out
}

/// Straight-through Gumbel-Softmax over rows of `probs`.
///
/// With `noise = Some(g)` (training) the relaxed sample is
/// `softmax((log p + g) / temperature)` and the hard sample is its argmax.
/// With `noise = None` (evaluation) no noise is added and the hard sample is
/// `argmax p`. Ties resolve to the lowest index in both modes.
pub fn gumbel_softmax_st(
    tape: &mut Tape,
    probs: Var,
    temperature: f64,
    noise: Option<&Tensor>,
    frozen: Option<&FrozenAssignment>,
) -> Result<StSample> {
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("temperature must be > 0, got {temperature}")));
    }
    let shape = tape.shape(probs);
    let floored = tape.clamp_min(probs, PROB_FLOOR);
    let logp = tape.log(floored)?;
    let perturbed = match noise {
        Some(g) => {
            if g.shape() != shape {
                return Err(Error::Shape {
                    op: "gumbel_softmax_st",
                    lhs: shape,
                    rhs: g.shape(),
                });
            }
            let gv = tape.constant(g.clone());
            tape.add(logp, gv)?
        }
        None => logp,
    };
    let scaled = tape.scale(perturbed, 1.0 / temperature);
    let soft = tape.row_softmax(scaled);
    let hard = match (frozen, noise) {
        (Some(f), _) => f.hard.clone(),
        (None, Some(_)) => one_hot_argmax(tape.value(soft)),
        (None, None) => one_hot_argmax(tape.value(probs)),
    };
    let z = tape.straight_through(soft, &hard, frozen.map(|f| &f.soft_reference))?;
    Ok(StSample { soft, hard, z })
}

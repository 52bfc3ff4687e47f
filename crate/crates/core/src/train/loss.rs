//! Negative log-likelihood, the sharpness term on correctly classified train
//! nodes and the hinge that keeps uncertainties above a margin.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Tape, Tensor, Var};

/// Probabilities are floored here before the log.
pub const NLL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub sharp: f64,
    pub calib: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(nll: f64, sharp: f64, calib: f64, beta1: f64, beta2: f64) -> Self {
        LossBreakdown {
            nll,
            sharp,
            calib,
            total: nll + beta1 * sharp + beta2 * calib,
        }
    }
}

fn check_mask(mask: &[usize]) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::contract("loss over an empty train mask"));
    }
    Ok(())
}

fn onehot(labels: &[Option<usize>], mask: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(mask.len(), classes);
    for (k, &i) in mask.iter().enumerate() {
        let y = labels[i].ok_or_else(|| Error::contract(format!("train node {i} has no label")))?;
        t.set(k, y, 1.0);
    }
    Ok(t)
}

/// Mean `−log ŷ_i[y_i]` over `mask`.
pub fn nll_on_tape(tape: &mut Tape, probs: Var, labels: &[Option<usize>], mask: &[usize]) -> Result<Var> {
    check_mask(mask)?;
    let classes = tape.shape(probs).1;
    let y = tape.constant(onehot(labels, mask, classes)?);
    let picked = tape.gather_rows(probs, Arc::new(mask.to_vec()))?;
    let picked = tape.mul(picked, y)?;
    let py = tape.row_sum(picked);
    let py = tape.clamp_min(py, NLL_FLOOR);
    let lp = tape.log(py)?;
    let mean = tape.mean_all(lp)?;
    Ok(tape.neg(mean))
}

/// `(1/|mask|) Σ 1[argmax ŷ_i = y_i] · u_i`. The indicator is read from the
/// current values and carries no gradient.
pub fn sharp_on_tape(tape: &mut Tape, probs: Var, u: Var, labels: &[Option<usize>], mask: &[usize]) -> Result<Var> {
    check_mask(mask)?;
    let p = tape.value(probs);
    let mut hit = Vec::with_capacity(mask.len());
    for &i in mask {
        let y = labels[i].ok_or_else(|| Error::contract(format!("train node {i} has no label")))?;
        hit.push(if p.row_argmax(i) == y { 1.0 } else { 0.0 });
    }
    let ind = tape.constant(Tensor::column(&hit));
    let ut = tape.gather_rows(u, Arc::new(mask.to_vec()))?;
    let prod = tape.mul(ut, ind)?;
    tape.mean_all(prod)
}

/// `(1/n) Σ max(0, τ − u_i)²` over every node.
pub fn calib_on_tape(tape: &mut Tape, u: Var, tau: f64) -> Result<Var> {
    let neg = tape.neg(u);
    let gap = tape.offset(neg, tau);
    let gap = tape.relu(gap);
    let sq = tape.mul(gap, gap)?;
    tape.mean_all(sq)
}

pub fn loss_nll(probs: &Tensor, labels: &[Option<usize>], mask: &[usize]) -> Result<f64> {
    let mut t = Tape::new();
    let p = t.constant(probs.clone());
    let l = nll_on_tape(&mut t, p, labels, mask)?;
    Ok(t.value(l).item())
}

pub fn loss_sharp(probs: &Tensor, labels: &[Option<usize>], u: &[f64], mask: &[usize]) -> Result<f64> {
    let mut t = Tape::new();
    let p = t.constant(probs.clone());
    let uv = t.constant(Tensor::column(u));
    let l = sharp_on_tape(&mut t, p, uv, labels, mask)?;
    Ok(t.value(l).item())
}

pub fn loss_calib(u: &[f64], tau: f64) -> Result<f64> {
    if u.is_empty() {
        return Err(Error::contract("calibration loss over zero nodes"));
    }
    let mut t = Tape::new();
    let uv = t.constant(Tensor::column(u));
    let l = calib_on_tape(&mut t, uv, tau)?;
    Ok(t.value(l).item())
}

/// Records `nll + β₁·sharp + β₂·calib` and returns it with its parts.
pub fn composite_on_tape(
    tape: &mut Tape,
    probs: Var,
    u: Var,
    labels: &[Option<usize>],
    mask: &[usize],
    beta1: f64,
    beta2: f64,
    tau: f64,
) -> Result<(Var, LossBreakdown)> {
    let nll = nll_on_tape(tape, probs, labels, mask)?;
    let sharp = sharp_on_tape(tape, probs, u, labels, mask)?;
    let calib = calib_on_tape(tape, u, tau)?;
    let s = tape.scale(sharp, beta1);
    let c = tape.scale(calib, beta2);
    let total = tape.add(nll, s)?;
    let total = tape.add(total, c)?;
    let b = LossBreakdown::combine(
        tape.value(nll).item(),
        tape.value(sharp).item(),
        tape.value(calib).item(),
        beta1,
        beta2,
    );
    Ok((total, b))
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Tensor;

pub const ECE_BINS: usize = 15;

/// Fraction of `mask` nodes whose top class (lowest id on ties) is the label.
pub fn accuracy(probs: &Tensor, labels: &[Option<usize>], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::contract("accuracy over an empty mask"));
    }
    let mut hit = 0usize;
    for &i in mask {
        let y = labels[i].ok_or_else(|| Error::contract(format!("node {i} is unlabeled")))?;
        if probs.row_argmax(i) == y {
            hit += 1;
        }
    }
    Ok(hit as f64 / mask.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence of the bin's members (0 when empty).
    pub confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub bins: Vec<EceBin>,
    pub ece: f64,
    pub n: usize,
}

/// Bin `b` covers confidences in `(b/B, (b+1)/B]`; bin 0 also takes 0.
fn bin_of(conf: f64, bins: usize) -> usize {
    let edge = |k: usize| k as f64 / bins as f64;
    let mut b = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
    while b > 0 && conf <= edge(b) {
        b -= 1;
    }
    while b + 1 < bins && conf > edge(b + 1) {
        b += 1;
    }
    b
}

/// Expected calibration error with `bins` equal-width confidence bins.
pub fn ece(probs: &Tensor, labels: &[Option<usize>], mask: &[usize], bins: usize) -> Result<EceReport> {
    if bins == 0 {
        return Err(Error::contract("ece needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit = vec![0usize; bins];
    for &i in mask {
        let y = labels[i].ok_or_else(|| Error::contract(format!("node {i} is unlabeled")))?;
        let k = probs.row_argmax(i);
        let conf = probs.get(i, k);
        let b = bin_of(conf, bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if k == y {
            hit[b] += 1;
        }
    }
    let n = mask.len();
    let mut total = 0.0;
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let (confidence, acc) = if count[b] > 0 {
            (conf_sum[b] / count[b] as f64, hit[b] as f64 / count[b] as f64)
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            total += count[b] as f64 / n as f64 * (acc - confidence).abs();
        }
        out.push(EceBin {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            count: count[b],
            confidence,
            accuracy: acc,
        });
    }
    Ok(EceReport {
        bins: out,
        ece: total,
        n,
    })
}

//! Plain mean-aggregation network: two layers of `ReLU(D⁻¹A H W)`, the last
//! without the nonlinearity, then softmax. No self-loops.

use super::ModelInput;
use crate::error::Result;
use crate::math::{glorot, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct MeanBaseline {
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug)]
pub struct MeanTrace {
    pub tape: Tape,
    pub leaves: [Var; 2],
    pub probs: Var,
}

impl MeanBaseline {
    pub fn init(rng: &Rng, input_dim: usize, hidden: usize, classes: usize) -> Self {
        let mut r = rng.child("init");
        MeanBaseline {
            w1: glorot(&mut r, input_dim, hidden).with_grad(),
            w2: glorot(&mut r, hidden, classes).with_grad(),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("mean.w1".into(), &self.w1), ("mean.w2".into(), &self.w2)]
    }

    /// `dropout` is an `n × hidden` inverted-dropout mask applied between
    /// the layers (training only).
    pub fn record(&self, input: &ModelInput, dropout: Option<&Tensor>) -> Result<MeanTrace> {
        let mut tape = Tape::new();
        let w1 = tape.param(&self.w1);
        let w2 = tape.param(&self.w2);
        let x = tape.constant(input.x.clone());
        let adj = &input.adj;

        let xw = tape.matmul(x, w1)?;
        let msgs = tape.gather_rows(xw, adj.src.clone())?;
        let h = tape.segment_mean(msgs, adj.seg.clone())?;
        let mut h = tape.relu(h);
        if let Some(mask) = dropout {
            let m = tape.constant(mask.clone());
            h = tape.mul(h, m)?;
        }
        let hw = tape.matmul(h, w2)?;
        let msgs = tape.gather_rows(hw, adj.src.clone())?;
        let logits = tape.segment_mean(msgs, adj.seg.clone())?;
        let probs = tape.row_softmax(logits);
        Ok(MeanTrace {
            tape,
            leaves: [w1, w2],
            probs,
        })
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Tensor> {
        let t = self.record(input, None)?;
        Ok(t.tape.value(t.probs).clone())
    }
}

//! Initial uncertainty from a feature-only classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DatasetBundle;
use crate::math::{glorot, matmul, softmax_rows, AdamState, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            hidden: 64,
            epochs: 100,
            lr: 1e-3,
        }
    }
}

/// Two-layer perceptron `softmax(ReLU(x W1 + b1) W2 + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitClassifier {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl InitClassifier {
    pub fn random(rng: &mut Rng, input_dim: usize, hidden: usize, classes: usize) -> Self {
        InitClassifier {
            w1: glorot(rng, input_dim, hidden).with_grad(),
            b1: Tensor::zeros(1, hidden).with_grad(),
            w2: glorot(rng, hidden, classes).with_grad(),
            b2: Tensor::zeros(1, classes).with_grad(),
        }
    }

    /// All weights zero: every prediction is uniform.
    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Self {
        InitClassifier {
            w1: Tensor::zeros(input_dim, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, classes),
            b2: Tensor::zeros(1, classes),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("init.w1".into(), &self.w1),
            ("init.b1".into(), &self.b1),
            ("init.w2".into(), &self.w2),
            ("init.b2".into(), &self.b2),
        ]
    }

    fn record(&self, tape: &mut Tape, x: Var) -> Result<(Var, [Var; 4])> {
        let w1 = tape.param(&self.w1);
        let b1 = tape.param(&self.b1);
        let w2 = tape.param(&self.w2);
        let b2 = tape.param(&self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add(o, b2)?;
        Ok((tape.row_softmax(o), [w1, b1, w2, b2]))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = matmul(x, &self.w1)?;
        for r in 0..h.rows() {
            for (v, b) in h.row_mut(r).iter_mut().zip(self.b1.data()) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut o = matmul(&h, &self.w2)?;
        for r in 0..o.rows() {
            for (v, b) in o.row_mut(r).iter_mut().zip(self.b2.data()) {
                *v += b;
            }
        }
        Ok(softmax_rows(&o))
    }

    /// `1 − max_c p(c | x_i)` for every row of `x`.
    pub fn uncertainty(&self, x: &Tensor) -> Result<Vec<f64>> {
        let p = self.predict(x)?;
        Ok((0..p.rows())
            .map(|i| 1.0 - p.row(i).iter().copied().fold(f64::MIN, f64::max))
            .collect())
    }
}

/// Trains the feature-only classifier on the train nodes of `bundle` and
/// returns it together with `u⁰` for every node. `x` is the feature matrix
/// the model will see.
pub fn init_uncertainty(
    bundle: &DatasetBundle,
    x: &Tensor,
    cfg: &InitConfig,
    rng: &Rng,
) -> Result<(InitClassifier, Vec<f64>)> {
    let train = bundle.mask(crate::graph::Role::Train);
    if train.is_empty() {
        return Err(Error::contract("initial uncertainty needs labeled train nodes"));
    }
    let c = bundle.num_classes;
    let mut clf = InitClassifier::random(&mut rng.child("init-mlp"), x.cols(), cfg.hidden, c);
    let xt = x.select_rows(&train);
    let mut onehot = Tensor::zeros(train.len(), c);
    for (k, &i) in train.iter().enumerate() {
        onehot.set(k, bundle.label(i), 1.0);
    }
    let mut adam = AdamState::new([&clf.w1, &clf.b1, &clf.w2, &clf.b2], cfg.lr, 0.0);
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let xv = tape.constant(xt.clone());
        let (probs, leaves) = clf.record(&mut tape, xv)?;
        let y = tape.constant(onehot.clone());
        let loss = nll_on_tape(&mut tape, probs, y)?;
        let grads = tape.backward(loss)?;
        let mut ps = [&mut clf.w1, &mut clf.b1, &mut clf.w2, &mut clf.b2];
        for (p, v) in ps.iter_mut().zip(&leaves) {
            p.set_grad(grads.tensor(*v).into_data())?;
        }
        adam.step(&mut ps)?;
    }
    for t in [&mut clf.w1, &mut clf.b1, &mut clf.w2, &mut clf.b2] {
        t.requires_grad = false;
        t.zero_grad();
    }
    let u0 = clf.uncertainty(x)?;
    Ok((clf, u0))
}

/// Mean of `−log p[y]` with `y` given as one-hot rows; probabilities are
/// floored at `1e-12`.
pub(crate) fn nll_on_tape(tape: &mut Tape, probs: Var, onehot: Var) -> Result<Var> {
    let picked = tape.mul(probs, onehot)?;
    let py = tape.row_sum(picked);
    let py = tape.clamp_min(py, 1e-12);
    let lp = tape.log(py)?;
    let mean = tape.mean_all(lp)?;
    Ok(tape.neg(mean))
}

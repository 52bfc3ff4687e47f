//! Central finite differences against the tape's reverse pass, per op and for
//! the whole model with its loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{DatasetBundle, Graph, Role};
use crate::math::{FrozenAssignment, Rng, Segments, Tape, Tensor, Var};
use crate::model::{forward_on_tape, Ablation, HyperParams, Mode, ModelInput, ModelParams, Noise};
use crate::train::composite_on_tape;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central differences of `f` with respect to every entry of every input.
pub fn finite_difference(inputs: &[Tensor], h: f64, f: &dyn Fn(&[Tensor]) -> Result<f64>) -> Result<Vec<Tensor>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        for e in 0..inputs[k].len() {
            let x = inputs[k].data()[e];
            work[k].data_mut()[e] = x + h;
            let up = f(&work)?;
            work[k].data_mut()[e] = x - h;
            let down = f(&work)?;
            work[k].data_mut()[e] = x;
            g.data_mut()[e] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

fn max_rel(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(x, y)| rel_error(*x, *y)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Checks `sum(build(inputs) ⊙ R)` for a fixed random `R`.
fn check_op(name: &str, inputs: Vec<Tensor>, rng: &mut Rng, build: &Build) -> Result<OpCheck> {
    let out_shape = {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        t.shape(o)
    };
    let r = Tensor::new(
        out_shape.0,
        out_shape.1,
        (0..out_shape.0 * out_shape.1).map(|_| rng.normal()).collect(),
    )?;
    let loss_of = |t: &mut Tape, vs: &[Var]| -> Result<Var> {
        let o = build(t, vs)?;
        let rv = t.constant(r.clone());
        let p = t.mul(o, rv)?;
        Ok(t.sum_all(p))
    };

    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| t.param(&x.clone().with_grad())).collect();
    let loss = loss_of(&mut t, &vs)?;
    let grads = t.backward(loss)?;
    let analytic: Vec<Tensor> = vs.iter().map(|&v| grads.tensor(v)).collect();

    let numeric = finite_difference(&inputs, FD_STEP, &|xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = loss_of(&mut t, &vs)?;
        Ok(t.value(l).item())
    })?;
    Ok(OpCheck {
        op: name.to_string(),
        max_rel_error: max_rel(&analytic, &numeric),
    })
}

fn rand_t(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.normal()).collect()).expect("shape")
}

/// Entries bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    rand_t(rng, r, c).map(|v| if v.abs() < 0.2 { v.signum() * 0.2 + v } else { v })
}

fn positive(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.uniform_range(0.3, 2.0)).collect()).expect("shape")
}

/// Finite-difference check of every differentiable tape op, including each
/// broadcast form of the binary ops.
pub fn op_checks(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = Rng::new(seed).child("op-checks");
    let r = &mut rng;
    let seg = Arc::new(Segments::from_counts([2, 0, 3, 1]));
    let idx = Arc::new(vec![2, 0, 2, 3, 1, 1]);
    let hard = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
    let mut checks = Vec::new();

    macro_rules! op {
        ($name:expr, [$($input:expr),*], $build:expr) => {{
            let inputs = vec![$($input),*];
            checks.push(check_op($name, inputs, r, &$build)?);
        }};
    }

    op!(
        "matmul",
        [rand_t(r, 3, 4), rand_t(r, 4, 2)],
        |t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1])
    );
    op!("transpose", [rand_t(r, 3, 2)], |t: &mut Tape, v: &[Var]| Ok(
        t.transpose(v[0])
    ));
    for (label, shape) in [("same", (3, 4)), ("row", (1, 4)), ("col", (3, 1)), ("scalar", (1, 1))] {
        let (a, b) = (rand_t(r, 3, 4), rand_t(r, shape.0, shape.1));
        op!(
            &format!("add/{label}"),
            [a.clone(), b.clone()],
            |t: &mut Tape, v: &[Var]| t.add(v[0], v[1])
        );
        op!(
            &format!("sub/{label}"),
            [a.clone(), b.clone()],
            |t: &mut Tape, v: &[Var]| t.sub(v[0], v[1])
        );
        op!(&format!("mul/{label}"), [a.clone(), b], |t: &mut Tape, v: &[Var]| t
            .mul(v[0], v[1]));
        let den = positive(r, shape.0, shape.1);
        op!(&format!("div/{label}"), [a, den], |t: &mut Tape, v: &[Var]| t
            .div(v[0], v[1]));
    }
    op!("scale", [rand_t(r, 2, 3)], |t: &mut Tape, v: &[Var]| Ok(
        t.scale(v[0], -1.7)
    ));
    op!("offset", [rand_t(r, 2, 3)], |t: &mut Tape, v: &[Var]| Ok(
        t.offset(v[0], 0.4)
    ));
    op!("neg", [rand_t(r, 2, 3)], |t: &mut Tape, v: &[Var]| Ok(t.neg(v[0])));
    op!("exp", [rand_t(r, 2, 3)], |t: &mut Tape, v: &[Var]| Ok(t.exp(v[0])));
    op!("log", [positive(r, 2, 3)], |t: &mut Tape, v: &[Var]| t.log(v[0]));
    op!("relu", [away_from_zero(r, 3, 3)], |t: &mut Tape, v: &[Var]| Ok(
        t.relu(v[0])
    ));
    op!("sigmoid", [rand_t(r, 3, 2)], |t: &mut Tape, v: &[Var]| Ok(
        t.sigmoid(v[0])
    ));
    op!("clamp_min", [away_from_zero(r, 3, 3)], |t: &mut Tape, v: &[Var]| Ok(
        t.clamp_min(v[0], 0.0)
    ));
    op!(
        "concat_cols",
        [rand_t(r, 3, 2), rand_t(r, 3, 1)],
        |t: &mut Tape, v: &[Var]| t.concat_cols(&[v[0], v[1]])
    );
    op!("slice_cols", [rand_t(r, 3, 4)], |t: &mut Tape, v: &[Var]| t
        .slice_cols(v[0], 1, 2));
    op!("slice_rows", [rand_t(r, 4, 2)], |t: &mut Tape, v: &[Var]| t
        .slice_rows(v[0], 1, 2));
    op!("row_sum", [rand_t(r, 3, 4)], |t: &mut Tape, v: &[Var]| Ok(
        t.row_sum(v[0])
    ));
    op!("row_mean", [rand_t(r, 3, 4)], |t: &mut Tape, v: &[Var]| Ok(
        t.row_mean(v[0])
    ));
    op!("col_sum", [rand_t(r, 3, 4)], |t: &mut Tape, v: &[Var]| Ok(
        t.col_sum(v[0])
    ));
    op!("sum_all", [rand_t(r, 3, 4)], |t: &mut Tape, v: &[Var]| Ok(
        t.sum_all(v[0])
    ));
    op!("mean_all", [rand_t(r, 3, 4)], |t: &mut Tape, v: &[Var]| t
        .mean_all(v[0]));
    op!("sq_norm_rows", [rand_t(r, 3, 4)], |t: &mut Tape, v: &[Var]| Ok(
        t.sq_norm_rows(v[0])
    ));
    op!("variance_rows", [rand_t(r, 3, 4)], |t: &mut Tape, v: &[Var]| t
        .variance_rows(v[0]));
    op!(
        "cosine_rows",
        [rand_t(r, 3, 4), rand_t(r, 3, 4)],
        |t: &mut Tape, v: &[Var]| t.cosine_rows(v[0], v[1])
    );
    op!("row_softmax", [rand_t(r, 3, 4)], |t: &mut Tape, v: &[Var]| Ok(
        t.row_softmax(v[0])
    ));
    let gi = idx.clone();
    op!("gather_rows", [rand_t(r, 4, 3)], move |t: &mut Tape, v: &[Var]| t
        .gather_rows(v[0], gi.clone()));
    let s = seg.clone();
    op!("segment_sum", [rand_t(r, 6, 2)], move |t: &mut Tape, v: &[Var]| t
        .segment_sum(v[0], s.clone()));
    let s = seg.clone();
    op!("segment_mean", [rand_t(r, 6, 2)], move |t: &mut Tape, v: &[Var]| t
        .segment_mean(v[0], s.clone()));
    let s = seg;
    op!("segment_softmax", [rand_t(r, 6, 1)], move |t: &mut Tape, v: &[Var]| t
        .segment_softmax(v[0], s.clone()));
    let soft0 = rand_t(r, 3, 2);
    let reference = soft0.clone();
    op!("straight_through", [soft0], move |t: &mut Tape, v: &[Var]| t
        .straight_through(v[0], &hard, Some(&reference)));
    Ok(checks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheck {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

/// Six nodes: a triangle with a two-edge tail, plus one isolated node.
pub fn six_node_bundle(seed: u64) -> DatasetBundle {
    let (graph, _) = Graph::from_pairs(6, [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)]).expect("valid pairs");
    let mut rng = Rng::new(seed).child("six-node");
    DatasetBundle {
        name: "six".into(),
        graph,
        features: Tensor::new(6, 4, (0..24).map(|_| rng.uniform_range(0.1, 1.0)).collect()).expect("shape"),
        labels: vec![Some(0), Some(1), Some(0), Some(1), Some(0), Some(1)],
        roles: vec![Role::Train; 6],
        num_classes: 2,
        class_names: None,
    }
}

/// Small settings with every loss term active: `τ` sits above the initial
/// uncertainties so the hinge has a gradient.
pub fn check_hyper(seed: u64, ablate: Ablation) -> HyperParams {
    HyperParams {
        hidden_dim: 4,
        layers: 2,
        communities: Some(2),
        tau_calib: 0.9,
        seed,
        ablate,
        ..HyperParams::default()
    }
}

/// Gradient of the composite training loss for every parameter entry,
/// against central differences. Dropout masks and Gumbel noise are drawn
/// once; the community choice is frozen at the unperturbed sample.
pub fn model_check(bundle: &DatasetBundle, hyper: &HyperParams) -> Result<ModelCheck> {
    let input = ModelInput::new(bundle, hyper);
    let root = Rng::new(hyper.seed);
    let m = hyper.num_communities(bundle.n());
    let mut params = ModelParams::init(
        &root,
        input.x.cols(),
        hyper.hidden_dim,
        hyper.layers,
        m,
        bundle.num_classes,
    );
    params.set_trainable(hyper.ablate);
    let noise = Noise::draw(
        &root.child("check"),
        bundle.n(),
        m,
        hyper.hidden_dim,
        hyper.layers,
        hyper.dropout,
    );
    let train = bundle.mask(Role::Train);
    let temperature = 0.7;

    let base = forward_on_tape(&input, &params, hyper.ablate, temperature, Mode::Train(&noise), None)?;
    let frozen = match (base.soft_assign, &base.state.z) {
        (Some(s), Some(z)) => Some(FrozenAssignment {
            hard: z.clone(),
            soft_reference: base.tape.value(s).clone(),
        }),
        _ => None,
    };
    drop(base);

    let loss_at = |p: &ModelParams| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tr = forward_on_tape(
            &input,
            p,
            hyper.ablate,
            temperature,
            Mode::Train(&noise),
            frozen.as_ref(),
        )?;
        let (loss, _) = composite_on_tape(
            &mut tr.tape,
            tr.probs,
            tr.u_final,
            &bundle.labels,
            &train,
            hyper.beta1,
            hyper.beta2,
            hyper.tau_calib,
        )?;
        Ok((tr.tape, tr.leaves, loss))
    };

    let (tape, leaves, loss) = loss_at(&params)?;
    let grads = tape.backward(loss)?;
    let names = params.names();
    let values: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let mut out = Vec::new();
    for (k, name) in names.iter().enumerate() {
        if !values[k].requires_grad {
            continue;
        }
        let analytic = grads.tensor(leaves[k]);
        let numeric = finite_difference(&values[k..k + 1], FD_STEP, &|xs: &[Tensor]| {
            let mut p = params.clone();
            *p.tensors_mut().swap_remove(k) = xs[0].clone();
            let (t, _, l) = loss_at(&p)?;
            Ok(t.value(l).item())
        })?;
        out.push(ParamCheck {
            name: name.clone(),
            entries: analytic.len(),
            max_rel_error: max_rel(&[analytic], &numeric),
        });
    }
    Ok(ModelCheck {
        max_rel_error: out.iter().map(|p| p.max_rel_error).fold(0.0, f64::max),
        params: out,
    })
}

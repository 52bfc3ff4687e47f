//! Reverse-mode differentiation over dense tensors.
//!
//! Operations are appended to a [`Tape`] in execution order, so every input id
//! precedes its output id. [`Tape::backward`] consumes the tape and returns the
//! accumulated gradient of a scalar loss for every node that depends on a
//! gradient-carrying leaf.

use std::sync::Arc;

use super::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is expanded to the left operand's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// 1×n against m×n
    Row,
    /// m×1 against m×n
    Col,
    /// 1×1 against m×n
    Scalar,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, j: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i * cols + j,
            Bcast::Row => j,
            Bcast::Col => i,
            Bcast::Scalar => 0,
        }
    }
}

/// Contiguous groups of rows: group `g` owns rows `offsets[g]..offsets[g + 1]`.
///
/// Used for per-node reductions over edge lists sorted by destination node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_offsets(offsets: Vec<usize>) -> Result<Self> {
        if offsets.first() != Some(&0) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::contract("segment offsets must start at 0 and be non-decreasing"));
        }
        Ok(Segments { offsets })
    }

    pub fn from_counts(counts: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for c in counts {
            let last = *offsets.last().unwrap();
            offsets.push(last + c);
        }
        Segments { offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn count(&self, g: usize) -> usize {
        self.offsets[g + 1] - self.offsets[g]
    }
}

const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    ClampMin(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RowSum(Var),
    RowMean(Var),
    ColSum(Var),
    SumAll(Var),
    MeanAll(Var),
    SqNormRows(Var),
    VarianceRows(Var),
    CosineRows(Var, Var),
    RowSoftmax(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SegmentSum(Var, Arc<Segments>),
    SegmentMean(Var, Arc<Segments>),
    SegmentSoftmax(Var, Arc<Segments>),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Single-threaded; never shared between threads while
/// recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when `v` did not influence the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(r, c, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(r, c),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    let (ar, ac) = a.shape();
    match b.shape() {
        (r, c) if r == ar && c == ac => Ok(Bcast::Same),
        (1, 1) => Ok(Bcast::Scalar),
        (1, c) if c == ac => Ok(Bcast::Row),
        (r, 1) if r == ar => Ok(Bcast::Col),
        _ => Err(shape_err(op, a, b)),
    }
}

/// Kept strictly inside (0, 1): past |x| ≈ 37 the rounded value would hit
/// 1.0 (and 0.0 past ≈ 745), so it stops at the nearest representable
/// interior point.
fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax of a plain tensor, with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.detached();
    let c = out.cols();
    for r in 0..out.rows() {
        softmax_in_place(&mut out.data_mut()[r * c..(r + 1) * c]);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a gradient-carrying leaf (a parameter).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// Records a leaf whose gradient is never needed.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Leaf carrying the value of `v` but cut from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).detached();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        matmul_into(ta.data(), tb.data(), out.data_mut(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = bcast_kind(name, ta, tb)?;
        let (m, n) = ta.shape();
        let mut out = Tensor::zeros(m, n);
        {
            let (ad, bd) = (ta.data(), tb.data());
            let od = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    let idx = i * n + j;
                    od[idx] = f(ad[idx], bd[kind.index(i, j, n)]);
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, make(a, b, kind), ng))
    }

    /// `a + b`; `b` may be a row (1×n), a column (m×1) or a scalar (1×1).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let tb = self.value(b);
        if tb.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let ng = self.ng(a);
        self.push(out, Op::Offset(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some(bad) = ta.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = ta.map(f64::ln);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Log(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// `max(a, floor)`; gradient flows only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|v| v.max(floor));
        let ng = self.ng(a);
        self.push(out, Op::ClampMin(a, floor), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let m = self.value(*first).rows();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                out.row_mut(i)[off..off + c].copy_from_slice(t.row(i));
                off += c;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: ta.shape(),
                rhs: (start, len),
            });
        }
        let m = ta.rows();
        let mut out = Tensor::zeros(m, len);
        for i in 0..m {
            out.row_mut(i).copy_from_slice(&ta.row(i)[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: ta.shape(),
                rhs: (start, len),
            });
        }
        let c = ta.cols();
        let out = Tensor::new(len, c, ta.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows()).map(|i| ta.row(i).iter().sum()).collect();
        let out = Tensor::new(ta.rows(), 1, data).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::RowSum(a), ng)
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols().max(1) as f64;
        let data = (0..ta.rows()).map(|i| ta.row(i).iter().sum::<f64>() / c).collect();
        let out = Tensor::new(ta.rows(), 1, data).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::RowMean(a), ng)
    }

    /// Column sums as a 1×n row.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(1, ta.cols());
        for i in 0..ta.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(ta.row(i)) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ColSum(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(a), ng))
    }

    /// Squared l2 norm of each row, as an m×1 column.
    pub fn sq_norm_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows()).map(|i| ta.row(i).iter().map(|v| v * v).sum()).collect();
        let out = Tensor::new(ta.rows(), 1, data).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::SqNormRows(a), ng)
    }

    /// Mean squared distance of the rows from their centroid, summed over
    /// columns: `(1/m) Σ_i ‖x_i − x̄‖²`. Returns a 1×1 tensor.
    pub fn variance_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let m = ta.rows();
        if m == 0 {
            return Err(Error::contract("variance of zero rows"));
        }
        let mean = column_means(ta);
        let mut s = 0.0;
        for i in 0..m {
            for (x, mu) in ta.row(i).iter().zip(&mean) {
                s += (x - mu) * (x - mu);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s / m as f64), Op::VarianceRows(a), ng))
    }

    /// Row-wise cosine similarity `⟨a,b⟩ / (‖a‖‖b‖ + 1e-12)`, as m×1.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("cosine_rows", ta, tb));
        }
        let data = (0..ta.rows())
            .map(|i| {
                let (ra, rb) = (ta.row(i), tb.row(i));
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (na * nb + COSINE_EPS)
            })
            .collect();
        let out = Tensor::new(ta.rows(), 1, data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::CosineRows(a, b), ng))
    }

    /// Softmax along each row (max-subtracted).
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::RowSoftmax(a), ng)
    }

    /// Rows `a[idx[0]], a[idx[1]], ...`; gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: ta.shape(),
                rhs: (bad, 0),
            });
        }
        let out = ta.select_rows(&idx);
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows(a, idx), ng))
    }

    fn check_segments(&self, op: &'static str, a: Var, seg: &Segments) -> Result<()> {
        let ta = self.value(a);
        if ta.rows() != seg.total() {
            return Err(Error::Shape {
                op,
                lhs: ta.shape(),
                rhs: (seg.total(), seg.len()),
            });
        }
        Ok(())
    }

    /// Per-segment row sums: output row g is the sum of the rows in segment g.
    pub fn segment_sum(&mut self, a: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments("segment_sum", a, &seg)?;
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Tensor::zeros(seg.len(), c);
        for g in 0..seg.len() {
            let orow = out.row_mut(g);
            for e in seg.range(g) {
                for (o, v) in orow.iter_mut().zip(ta.row(e)) {
                    *o += v;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SegmentSum(a, seg), ng))
    }

    /// Per-segment row means; empty segments yield zero rows.
    pub fn segment_mean(&mut self, a: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments("segment_mean", a, &seg)?;
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Tensor::zeros(seg.len(), c);
        for g in 0..seg.len() {
            let k = seg.count(g);
            if k == 0 {
                continue;
            }
            let orow = out.row_mut(g);
            for e in seg.range(g) {
                for (o, v) in orow.iter_mut().zip(ta.row(e)) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o /= k as f64;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SegmentMean(a, seg), ng))
    }

    /// Softmax of a column of scores within each segment.
    pub fn segment_softmax(&mut self, a: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments("segment_softmax", a, &seg)?;
        let ta = self.value(a);
        if ta.cols() != 1 {
            return Err(Error::Shape {
                op: "segment_softmax",
                lhs: ta.shape(),
                rhs: (ta.rows(), 1),
            });
        }
        let mut out = ta.detached();
        for g in 0..seg.len() {
            softmax_in_place(&mut out.data_mut()[seg.range(g)]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SegmentSoftmax(a, seg), ng))
    }

    /// Straight-through estimator. The forward value is
    /// `hard + (soft − reference)`, which is exactly `hard` when no reference
    /// is given; the backward pass hands the incoming gradient to `soft`
    /// unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: &Tensor, reference: Option<&Tensor>) -> Result<Var> {
        let ts = self.value(soft);
        if ts.shape() != hard.shape() {
            return Err(shape_err("straight_through", ts, hard));
        }
        let out = match reference {
            None => hard.detached(),
            Some(r) => {
                if r.shape() != hard.shape() {
                    return Err(shape_err("straight_through", r, hard));
                }
                let data = hard
                    .data()
                    .iter()
                    .zip(ts.data())
                    .zip(r.data())
                    .map(|((h, s), r)| h + (s - r))
                    .collect();
                Tensor::new(hard.rows(), hard.cols(), data)?
            }
        };
        let ng = self.ng(soft);
        Ok(self.push(out, Op::StraightThrough(soft), ng))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let shapes: Vec<_> = self.nodes.iter().map(|nd| nd.value.shape()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        // Only leaves that asked for gradients keep them, plus intermediates
        // for inspection; constants are dropped.
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_nt_acc(g, tb.data(), ga, m, k, n);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_tn_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = out.shape();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b, k) | Op::Sub(a, b, k) => {
                let sign = if matches!(self.nodes[id].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                let (m, n) = out.shape();
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..m {
                        for j in 0..n {
                            gb[k.index(i, j, n)] += sign * g[i * n + j];
                        }
                    }
                }
            }
            Op::Mul(a, b, k) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = out.shape();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * tb.data()[k.index(i, j, n)];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..m {
                        for j in 0..n {
                            gb[k.index(i, j, n)] += g[i * n + j] * ta.data()[i * n + j];
                        }
                    }
                }
            }
            Op::Div(a, b, k) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = out.shape();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] / tb.data()[k.index(i, j, n)];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..m {
                        for j in 0..n {
                            let bi = k.index(i, j, n);
                            let bv = tb.data()[bi];
                            gb[bi] -= g[i * n + j] * ta.data()[i * n + j] / (bv * bv);
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                }
            }
            Op::Offset(a) | Op::StraightThrough(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += y * o;
                    }
                }
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                        *x += y / v;
                    }
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += y * s * (1.0 - s);
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let ta = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *v > *floor {
                            *x += y;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.shape();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if let Some(gp) = self.acc(grads, *p) {
                        for i in 0..m {
                            for j in 0..c {
                                gp[i * c + j] += g[i * n + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, len) = out.shape();
                let n = self.value(*a).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..len {
                            ga[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, y) in ga[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::RowSum(a) | Op::RowMean(a) => {
                let n = self.value(*a).cols();
                let f = if matches!(self.nodes[id].op, Op::RowMean(_)) {
                    1.0 / n.max(1) as f64
                } else {
                    1.0
                };
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        for x in &mut ga[i * n..(i + 1) * n] {
                            *x += f * gi;
                        }
                    }
                }
            }
            Op::ColSum(a) => {
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx % n];
                    }
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let len = self.value(*a).len();
                let f = if matches!(self.nodes[id].op, Op::MeanAll(_)) {
                    g[0] / len as f64
                } else {
                    g[0]
                };
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += f;
                    }
                }
            }
            Op::SqNormRows(a) => {
                let ta = self.value(*a);
                let n = ta.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        for (x, v) in ga[i * n..(i + 1) * n].iter_mut().zip(ta.row(i)) {
                            *x += 2.0 * v * gi;
                        }
                    }
                }
            }
            Op::VarianceRows(a) => {
                let ta = self.value(*a);
                let (m, n) = ta.shape();
                let mean = column_means(ta);
                if let Some(ga) = self.acc(grads, *a) {
                    let f = 2.0 * g[0] / m as f64;
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += f * (ta.get(i, j) - mean[j]);
                        }
                    }
                }
            }
            Op::CosineRows(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.cols();
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for (i, gi) in g.iter().enumerate() {
                    let (ra, rb) = (ta.row(i), tb.row(i));
                    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let den = na * nb + COSINE_EPS;
                    for j in 0..n {
                        // d‖a‖/da = a/‖a‖, taken as 0 at a = 0.
                        let dna = if na > 0.0 { ra[j] / na } else { 0.0 };
                        let dnb = if nb > 0.0 { rb[j] / nb } else { 0.0 };
                        da[i * n + j] += gi * (rb[j] / den - dot * nb * dna / (den * den));
                        db[i * n + j] += gi * (ra[j] / den - dot * na * dnb / (den * den));
                    }
                }
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(&da) {
                        *x += y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (x, y) in gb.iter_mut().zip(&db) {
                        *x += y;
                    }
                }
            }
            Op::RowSoftmax(a) => {
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..out.rows() {
                        let y = out.row(i);
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[i * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (e, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga[src * n + j] += g[e * n + j];
                        }
                    }
                }
            }
            Op::SegmentSum(a, seg) | Op::SegmentMean(a, seg) => {
                let mean = matches!(self.nodes[id].op, Op::SegmentMean(..));
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for s in 0..seg.len() {
                        let k = seg.count(s);
                        if k == 0 {
                            continue;
                        }
                        let f = if mean { 1.0 / k as f64 } else { 1.0 };
                        for e in seg.range(s) {
                            for j in 0..n {
                                ga[e * n + j] += f * g[s * n + j];
                            }
                        }
                    }
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                let y = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for s in 0..seg.len() {
                        let r = seg.range(s);
                        let dot: f64 = r.clone().map(|e| y[e] * g[e]).sum();
                        for e in r {
                            ga[e] += y[e] * (g[e] - dot);
                        }
                    }
                }
            }
        }
    }
}

fn column_means(t: &Tensor) -> Vec<f64> {
    let (m, n) = t.shape();
    let mut mean = vec![0.0; n];
    for i in 0..m {
        for (mu, x) in mean.iter_mut().zip(t.row(i)) {
            *mu += x;
        }
    }
    for mu in mean.iter_mut() {
        *mu /= m.max(1) as f64;
    }
    mean
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_stays_open() {
        for x in [-1e4, -800.0, -40.0, 40.0, 1e4] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "{x} -> {s}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![-1.0, 0.0, 2.0]]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn cosine_of_self_is_one() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![3.0, -4.0, 1.0], vec![0.1, 0.2, 0.3]]));
        let c = t.cosine_rows(x, x).unwrap();
        for &v in t.value(c).data() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn variance_of_two_points() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]));
        let v = t.variance_rows(x).unwrap();
        assert_eq!(t.value(v).item(), 2.0);
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0 + 3f64.ln()], vec![1000.0, 0.0]]);
        let y = softmax_rows(&x);
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert!((y.get(1, 0) - 0.25).abs() < 1e-12);
        assert!((y.get(1, 1) - 0.75).abs() < 1e-12);
        assert_eq!(y.get(2, 0), 1.0);
        assert!(y.get(2, 1) < 1e-300);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        assert!(matches!(t.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn linear_loss_gradient_is_outer_product() {
        // loss = sum(W·x) with x fixed: dW[i][j] = x[j].
        let mut t = Tape::new();
        let w = t.param(&Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, 0.0]]));
        let x = t.constant(Tensor::column(&[1.0, 2.0, 3.0]));
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum_all(y);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut t = Tape::new();
        let w = t.param(&Tensor::zeros(2, 2));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(3, 2));
        let row = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let col = t.constant(Tensor::column(&[1.0, 2.0, 3.0]));
        let s = t.constant(Tensor::scalar(4.0));
        let bad = t.constant(Tensor::zeros(2, 3));
        let r = t.add(a, row).unwrap();
        assert_eq!(t.value(r).row(2), &[1.0, 2.0]);
        let c = t.add(a, col).unwrap();
        assert_eq!(t.value(c).row(2), &[3.0, 3.0]);
        let d = t.add(a, s).unwrap();
        assert_eq!(t.value(d).row(0), &[4.0, 4.0]);
        assert!(t.add(a, bad).is_err());
    }

    #[test]
    fn straight_through_value_is_hard() {
        let mut t = Tape::new();
        let soft = t.param(&Tensor::from_rows(&[vec![0.7, 0.3]]));
        let hard = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let z = t.straight_through(soft, &hard, None).unwrap();
        assert_eq!(t.value(z), &hard);
        let w = t.constant(Tensor::column(&[2.0, 5.0]));
        let y = t.matmul(z, w).unwrap();
        let loss = t.sum_all(y);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(soft).unwrap(), &[2.0, 5.0]);
    }
}

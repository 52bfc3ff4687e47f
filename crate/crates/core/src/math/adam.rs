//! Adam with bias correction. Weight decay is classic L2: `wd · p` is added to
//! the gradient before the moment updates (not the decoupled AdamW form).

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta_m: f64,
    pub beta_v: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
}

const MAX_STEPS: u64 = 1 << 31;

impl AdamState {
    /// Moments sized for `params`, in the order they will be passed to
    /// [`AdamState::step`].
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<_> = params.into_iter().map(Tensor::shape).collect();
        AdamState {
            lr,
            beta_m: 0.9,
            beta_v: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: shapes.iter().map(|(r, c)| vec![0.0; r * c]).collect(),
            second: shapes.iter().map(|(r, c)| vec![0.0; r * c]).collect(),
            shapes,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every tensor with `requires_grad`; the others are left
    /// untouched. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.shapes.len() {
            return Err(Error::contract(format!(
                "adam expected {} parameters, got {}",
                self.shapes.len(),
                params.len()
            )));
        }
        for (p, &shape) in params.iter().zip(&self.shapes) {
            if p.shape() != shape {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: shape,
                    rhs: p.shape(),
                });
            }
        }
        if self.step >= MAX_STEPS {
            return Err(Error::contract("adam step counter exhausted"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc_m = 1.0 - self.beta_m.powi(t);
        let bc_v = 1.0 - self.beta_v.powi(t);

        for (k, p) in params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let wd = self.weight_decay;
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]) + wd * *w;
                m[i] = self.beta_m * m[i] + (1.0 - self.beta_m) * g;
                v[i] = self.beta_v * v[i] + (1.0 - self.beta_v) * g * g;
                let m_hat = m[i] / bc_m;
                let v_hat = v[i] / bc_v;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let f = max_norm / total;
        for p in params.iter_mut() {
            if let Some(g) = p.grad().map(|g| g.iter().map(|x| x * f).collect::<Vec<_>>()) {
                p.set_grad(g).expect("same shape");
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::scalar(v).with_grad()
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = scalar_param(0.37);
        let mut adam = AdamState::new([&p], 1e-3, 0.0);
        p.set_grad(vec![0.0]).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.item(), 0.37);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction: Δ = -lr · 1/(1 + eps).
        let mut p = scalar_param(0.0);
        let mut adam = AdamState::new([&p], 1e-3, 0.0);
        p.set_grad(vec![1.0]).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15, "{}", p.item());
    }

    #[test]
    fn converges_on_quadratic() {
        // lr large enough for 200 steps; the recurrence is what is under test.
        let mut p = scalar_param(0.0);
        let mut adam = AdamState::new([&p], 0.1, 0.0);
        for _ in 0..200 {
            let g = 2.0 * (p.item() - 3.0);
            p.set_grad(vec![g]).unwrap();
            adam.step(&mut [&mut p]).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 1e-2, "{}", p.item());
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = AdamState::new([&p], 0.1, 0.5);
        p.set_grad(vec![1.0]).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.item(), 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(2, 2).with_grad();
        let mut adam = AdamState::new([&Tensor::zeros(2, 3)], 0.1, 0.0);
        assert!(matches!(adam.step(&mut [&mut p]), Err(Error::Shape { .. })));
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut a = Tensor::zeros(1, 2).with_grad();
        a.set_grad(vec![3.0, 4.0]).unwrap();
        let before = clip_grad_norm(&mut [&mut a], 1.0);
        assert_eq!(before, 5.0);
        let g = a.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}

use super::Ablation;
use crate::error::{Error, Result};
use crate::math::checkpoint::Checkpoint;
use crate::math::{glorot, uniform, Rng, Tensor};

/// Learnable weights. Matrices act on row vectors (`h · W`), so a projection
/// from `a` to `b` features is stored as `a × b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Per-layer projection, `F_in × F'`.
    pub w_o: Vec<Tensor>,
    /// Per-layer attention vector `[a_self; a_neighbor]`, `2F' × 1`.
    pub att: Vec<Tensor>,
    /// Community scores, `F' × M`.
    pub w_m: Tensor,
    pub w_c: Tensor,
    pub w_g: Tensor,
    /// Classifier, `F' × C`.
    pub w_f: Tensor,
    /// Fusion attention, `2F' × 1`.
    pub a_fuse: Tensor,
    /// Uncertainty map `sigmoid(fu_w · s + fu_b)`.
    pub fu_w: Tensor,
    pub fu_b: Tensor,
}

const ATT_BOUND: f64 = 0.1;

impl ModelParams {
    pub fn init(rng: &Rng, input_dim: usize, hidden: usize, layers: usize, communities: usize, classes: usize) -> Self {
        let mut r = rng.child("init");
        let mut w_o = Vec::with_capacity(layers);
        let mut att = Vec::with_capacity(layers);
        for l in 0..layers {
            let fan_in = if l == 0 { input_dim } else { hidden };
            w_o.push(glorot(&mut r, fan_in, hidden));
            att.push(uniform(&mut r, 2 * hidden, 1, ATT_BOUND));
        }
        let mut p = ModelParams {
            w_o,
            att,
            w_m: glorot(&mut r, hidden, communities),
            w_c: glorot(&mut r, hidden, hidden),
            w_g: glorot(&mut r, hidden, hidden),
            w_f: glorot(&mut r, hidden, classes),
            a_fuse: uniform(&mut r, 2 * hidden, 1, ATT_BOUND),
            fu_w: Tensor::scalar(1.0),
            fu_b: Tensor::scalar(0.0),
        };
        p.set_trainable(Ablation::NONE);
        p
    }

    pub fn layers(&self) -> usize {
        self.w_o.len()
    }

    pub fn hidden(&self) -> usize {
        self.w_c.rows()
    }

    pub fn communities(&self) -> usize {
        self.w_m.cols()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers() {
            names.push(format!("w_o.{l}"));
            names.push(format!("att.{l}"));
        }
        for s in ["w_m", "w_c", "w_g", "w_f", "a_fuse", "fu_w", "fu_b"] {
            names.push(s.to_string());
        }
        names
    }

    /// Same order as [`ModelParams::names`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (w, a) in self.w_o.iter().zip(&self.att) {
            out.push(w);
            out.push(a);
        }
        out.extend([
            &self.w_m,
            &self.w_c,
            &self.w_g,
            &self.w_f,
            &self.a_fuse,
            &self.fu_w,
            &self.fu_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (w, a) in self.w_o.iter_mut().zip(self.att.iter_mut()) {
            out.push(w);
            out.push(a);
        }
        out.extend([
            &mut self.w_m,
            &mut self.w_c,
            &mut self.w_g,
            &mut self.w_f,
            &mut self.a_fuse,
            &mut self.fu_w,
            &mut self.fu_b,
        ]);
        out
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    /// Whether the parameter called `name` takes part in training under
    /// `ablate`. Weights that the ablated model never reads are frozen.
    pub fn is_trainable(name: &str, ablate: Ablation) -> bool {
        match name {
            "w_m" | "w_c" => !ablate.flat(),
            "w_g" => !ablate.global,
            "fu_w" | "fu_b" => !ablate.uncertainty,
            _ => true,
        }
    }

    pub fn set_trainable(&mut self, ablate: Ablation) {
        let names = self.names();
        for (name, t) in names.iter().zip(self.tensors_mut()) {
            t.requires_grad = ModelParams::is_trainable(name, ablate);
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, layers: usize, ablate: Ablation) -> Result<Self> {
        let get = |name: &str| {
            ck.get(name)
                .cloned()
                .ok_or_else(|| Error::contract(format!("checkpoint lacks parameter {name}")))
        };
        let mut w_o = Vec::new();
        let mut att = Vec::new();
        for l in 0..layers {
            w_o.push(get(&format!("w_o.{l}"))?);
            att.push(get(&format!("att.{l}"))?);
        }
        let mut p = ModelParams {
            w_o,
            att,
            w_m: get("w_m")?,
            w_c: get("w_c")?,
            w_g: get("w_g")?,
            w_f: get("w_f")?,
            a_fuse: get("a_fuse")?,
            fu_w: get("fu_w")?,
            fu_b: get("fu_b")?,
        };
        p.set_trainable(ablate);
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_names() {
        let p = ModelParams::init(&Rng::new(0), 5, 4, 2, 3, 2);
        let shapes: Vec<_> = p.tensors().iter().map(|t| t.shape()).collect();
        assert_eq!(
            shapes,
            vec![
                (5, 4),
                (8, 1),
                (4, 4),
                (8, 1),
                (4, 3),
                (4, 4),
                (4, 4),
                (4, 2),
                (8, 1),
                (1, 1),
                (1, 1)
            ]
        );
        assert_eq!(p.names().len(), shapes.len());
        assert!(p.att.iter().all(|a| a.data().iter().all(|v| v.abs() <= ATT_BOUND)));
        assert_eq!((p.fu_w.item(), p.fu_b.item()), (1.0, 0.0));
    }

    #[test]
    fn ablation_freezes_unused_weights() {
        let mut p = ModelParams::init(&Rng::new(0), 3, 2, 1, 2, 2);
        p.set_trainable("community,global".parse().unwrap());
        assert!(!p.w_m.requires_grad && !p.w_c.requires_grad && !p.w_g.requires_grad);
        assert!(p.fu_w.requires_grad);
        p.set_trainable("uncertainty".parse().unwrap());
        assert!(p.w_m.requires_grad && !p.fu_w.requires_grad && !p.fu_b.requires_grad);
    }
}

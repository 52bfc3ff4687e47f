//! The hierarchical model: local uncertainty-gated layers, community pooling,
//! a global node and per-node fusion of the three scales.

mod baseline;
mod forward;
mod init;
mod layers;
mod params;
mod state;

pub use baseline::{MeanBaseline, MeanTrace};
pub use forward::{forward, forward_on_tape, Mode, Noise, Trace};
pub use init::{init_uncertainty, InitClassifier, InitConfig};
pub use layers::{
    aggregate, assign_communities, fuse_and_classify, global_integrate, local_layer, neighbor_attention,
    neighbor_spread, pool_communities, Adjacency, Fusion, GlobalOut, LocalOut, Pooled, UncertaintyMap,
};
pub use params::ModelParams;
pub use state::{ModelState, NodeExport};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::DatasetBundle;
use crate::math::Tensor;

/// Which parts of the model are switched off. Several may be combined
/// (`community,global` gives flat uncertainty attention).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub community: bool,
    pub global: bool,
    pub uncertainty: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        community: false,
        global: false,
        uncertainty: false,
    };

    pub fn is_none(&self) -> bool {
        *self == Ablation::NONE
    }

    /// True when neither the community nor the global candidate is used, in
    /// which case assignment and pooling are skipped entirely.
    pub fn flat(&self) -> bool {
        self.community && self.global
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.community {
            parts.push("community");
        }
        if self.global {
            parts.push("global");
        }
        if self.uncertainty {
            parts.push("uncertainty");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::NONE;
        for part in s.split(',').map(str::trim) {
            match part {
                "none" | "" => {}
                "community" => a.community = true,
                "global" => a.global = true,
                "uncertainty" => a.uncertainty = true,
                other => return Err(Error::config(format!("unknown ablation {other:?}"))),
            }
        }
        Ok(a)
    }
}

impl Serialize for Ablation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ablation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How a local layer combines a node's own embedding with its neighbor
/// aggregate `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mix {
    /// `th + p·l + (1 − p)·(th − l)` with `p = cos(th, l)`.
    #[default]
    Cosine,
    /// `th + l`. Diagnostic alternative, not the default.
    LowPass,
}

impl FromStr for Mix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Mix::Cosine),
            "low_pass" => Ok(Mix::LowPass),
            _ => Err(Error::config(format!("unknown mix {s:?} (cosine, low_pass)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub hidden_dim: usize,
    pub layers: usize,
    /// `None` picks `max(2, round(sqrt(n)))`.
    pub communities: Option<usize>,
    pub temp_start: f64,
    pub temp_end: f64,
    pub dropout: f64,
    pub tau_calib: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablate: Ablation,
    /// Scale each feature row to unit l1 norm before the first layer.
    pub row_normalize: bool,
    pub mix: Mix,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            hidden_dim: 64,
            layers: 2,
            communities: None,
            temp_start: 1.0,
            temp_end: 0.1,
            dropout: 0.5,
            tau_calib: 0.1,
            beta1: 0.3,
            beta2: 0.1,
            lr: 1e-3,
            weight_decay: 5e-4,
            epochs: 300,
            seed: 0,
            ablate: Ablation::NONE,
            row_normalize: true,
            mix: Mix::Cosine,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.layers < 1 {
            return bad("layers must be >= 1".into());
        }
        if self.hidden_dim < 1 {
            return bad("hidden_dim must be >= 1".into());
        }
        if self.communities == Some(0) {
            return bad("communities must be >= 1".into());
        }
        if !(self.temp_end > 0.0 && self.temp_end <= self.temp_start) {
            return bad(format!(
                "need 0 < temp_end <= temp_start, got {} and {}",
                self.temp_end, self.temp_start
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        for (name, v) in [
            ("tau_calib", self.tau_calib),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }

    pub fn num_communities(&self, n: usize) -> usize {
        self.communities
            .unwrap_or_else(|| ((n as f64).sqrt().round() as usize).max(2))
    }

    /// Gumbel temperature at `epoch` of `total`: geometric from `temp_start`
    /// to `temp_end`.
    pub fn temperature(&self, epoch: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.temp_start;
        }
        let t = (epoch.min(total - 1)) as f64 / (total - 1) as f64;
        self.temp_start * (self.temp_end / self.temp_start).powf(t)
    }
}

/// Everything the forward pass needs from a bundle, prepared once.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub x: Tensor,
    pub adj: Adjacency,
    pub num_classes: usize,
    pub mix: Mix,
}

impl ModelInput {
    pub fn new(bundle: &DatasetBundle, hyper: &HyperParams) -> Self {
        let x = if hyper.row_normalize {
            row_normalize(&bundle.features)
        } else {
            bundle.features.clone()
        };
        ModelInput {
            x,
            adj: Adjacency::new(&bundle.graph),
            num_classes: bundle.num_classes,
            mix: hyper.mix,
        }
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }
}

/// Rows divided by their l1 norm; all-zero rows are left as they are.
pub fn row_normalize(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        if s > 0.0 {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    out
}

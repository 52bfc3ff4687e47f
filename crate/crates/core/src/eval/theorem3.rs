//! Accuracy of the model variants on generated graphs of controlled
//! heterophily, alongside the measured two-hop homophily.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{synth_heterophily, two_hop_homophily, Role, SynthSpec};
use crate::math::Rng;
use crate::model::{Ablation, ModelInput};
use crate::train::{train, train_mean_baseline, TrainConfig};

use super::{ece, ECE_BINS};

pub const CSV_HEADER: &str = "variant,p,seed,q_measured,test_acc,ece,mean_u";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Communities and global node removed: uncertainty-gated attention only.
    Flat,
    /// Hierarchy kept, uncertainty gating removed.
    #[serde(rename = "nouncert")]
    NoUncert,
    /// Two-layer mean aggregation.
    Mean,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Flat, Variant::NoUncert, Variant::Mean];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Flat => "flat",
            Variant::NoUncert => "nouncert",
            Variant::Mean => "mean",
        }
    }

    /// The ablation a model variant trains with; `None` for the baseline.
    pub fn ablation(self) -> Option<Ablation> {
        match self {
            Variant::Full => Some(Ablation::NONE),
            Variant::Flat => Some(Ablation {
                community: true,
                global: true,
                uncertainty: false,
            }),
            Variant::NoUncert => Some(Ablation {
                uncertainty: true,
                ..Ablation::NONE
            }),
            Variant::Mean => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?} (full, flat, nouncert, mean)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Config {
    pub n: usize,
    pub num_classes: usize,
    pub degree: usize,
    pub feature_noise: f64,
    pub p_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Training settings; the seed and ablation are set per point.
    pub train: TrainConfig,
}

impl Default for Theorem3Config {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.hyper.row_normalize = false;
        Theorem3Config {
            n: 1000,
            num_classes: 2,
            degree: 10,
            feature_noise: 1.0,
            p_grid: vec![0.1, 0.2],
            seeds: (0..10).collect(),
            variants: vec![Variant::Full, Variant::Flat, Variant::NoUncert, Variant::Mean],
            train,
        }
    }
}

impl Theorem3Config {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.p_grid.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::config(format!("p must lie in (0, 1), got {p}")));
        }
        if self.seeds.is_empty() || self.variants.is_empty() || self.p_grid.is_empty() {
            return Err(Error::config("empty p grid, seed list or variant list"));
        }
        self.train.validate()
    }

    pub fn points(&self) -> Vec<(f64, u64, Variant)> {
        let mut out = Vec::new();
        for &p in &self.p_grid {
            for &s in &self.seeds {
                for &v in &self.variants {
                    out.push((p, s, v));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Row {
    pub variant: Variant,
    pub p: f64,
    pub seed: u64,
    pub q_measured: f64,
    pub test_acc: f64,
    pub ece: f64,
    /// Mean final-layer uncertainty; `NaN` for the baseline, which has none.
    pub mean_u: f64,
}

impl Theorem3Row {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.variant, self.p, self.seed, self.q_measured, self.test_acc, self.ece, self.mean_u
        )
    }
}

/// Generates the bundle for `(p, seed)` and trains one variant on it.
pub fn run_point(cfg: &Theorem3Config, p: f64, seed: u64, variant: Variant) -> Result<Theorem3Row> {
    let spec = SynthSpec {
        n: cfg.n,
        num_classes: cfg.num_classes,
        degree: cfg.degree,
        p,
        feature_noise: cfg.feature_noise,
    };
    let bundle = synth_heterophily(&spec, &Rng::new(seed).child("synth"))?;
    let q = two_hop_homophily(&bundle)?;
    let mut tc = cfg.train.clone();
    tc.hyper.seed = seed;
    let (test_acc, ece_v, mean_u) = match variant.ablation() {
        Some(ab) => {
            tc.hyper.ablate = ab;
            let out = train(&bundle, &tc, &mut |_| Ok(()))?;
            let input = ModelInput::new(&bundle, &tc.hyper);
            let (ev, state) = crate::train::evaluate(&bundle, &input, &out.params, &tc.hyper)?;
            (ev.test_acc, ev.test_ece, state.mean_u_local())
        }
        None => {
            let out = train_mean_baseline(&bundle, &tc)?;
            let input = ModelInput::new(&bundle, &tc.hyper);
            let probs = out.model.predict(&input)?;
            let e = ece(&probs, &bundle.labels, &bundle.mask(Role::Test), ECE_BINS)?.ece;
            (out.best.test_acc, e, f64::NAN)
        }
    };
    Ok(Theorem3Row {
        variant,
        p,
        seed,
        q_measured: q,
        test_acc,
        ece: ece_v,
        mean_u,
    })
}

/// Runs every point on up to `threads` worker threads. Rows come back in
/// [`Theorem3Config::points`] order whatever the scheduling.
pub fn theorem3_experiment(cfg: &Theorem3Config, threads: usize) -> Result<Vec<Theorem3Row>> {
    cfg.validate()?;
    let points = cfg.points();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<Theorem3Row>>>> =
        points.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.max(1).min(points.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(&(p, seed, v)) = points.get(k) else { break };
                let r = run_point(cfg, p, seed, v);
                if let Ok(row) = &r {
                    log::info!("{}", row.csv());
                }
                *slots[k].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every point ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub p: f64,
    pub runs: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_q: f64,
}

/// Mean and population standard deviation of test accuracy per
/// `(variant, p)`, in first-seen order.
pub fn summarize(rows: &[Theorem3Row]) -> Vec<VariantSummary> {
    let mut keys: Vec<(Variant, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(v, p)| v == r.variant && p == r.p) {
            keys.push((r.variant, r.p));
        }
    }
    keys.into_iter()
        .map(|(v, p)| {
            let sel: Vec<&Theorem3Row> = rows.iter().filter(|r| r.variant == v && r.p == p).collect();
            let k = sel.len() as f64;
            let mean = sel.iter().map(|r| r.test_acc).sum::<f64>() / k;
            let var = sel.iter().map(|r| (r.test_acc - mean).powi(2)).sum::<f64>() / k;
            VariantSummary {
                variant: v,
                p,
                runs: sel.len(),
                mean_acc: mean,
                std_acc: var.sqrt(),
                mean_q: sel.iter().map(|r| r.q_measured).sum::<f64>() / k,
            }
        })
        .collect()
}

//! Full-graph training with the composite loss, Gumbel temperature annealing,
//! the ECE-driven β₂ controller, early stopping and best-model checkpoints.

mod loss;

pub use loss::{
    calib_on_tape, composite_on_tape, loss_calib, loss_nll, loss_sharp, nll_on_tape, sharp_on_tape, LossBreakdown,
};

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{accuracy, ece, ECE_BINS};
use crate::graph::{DatasetBundle, Role};
use crate::math::checkpoint;
use crate::math::{clip_grad_norm, AdamState, Rng, Tensor};
use crate::model::{
    forward, forward_on_tape, init_uncertainty, HyperParams, InitClassifier, InitConfig, MeanBaseline, Mode,
    ModelInput, ModelParams, ModelState, Noise,
};

/// The multiplicative β₂ rule applied every `check_every` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Feedback {
    pub enabled: bool,
    pub check_every: usize,
    pub up: f64,
    pub down: f64,
    pub ece_hi: f64,
    pub ece_lo: f64,
    /// Keep applying the rule after the first check.
    pub repeat: bool,
}

impl Default for Feedback {
    fn default() -> Self {
        Feedback {
            enabled: true,
            check_every: 10,
            up: 1.2,
            down: 0.8,
            ece_hi: 0.05,
            ece_lo: 0.02,
            repeat: true,
        }
    }
}

impl Feedback {
    /// Whether the rule fires after the 1-based epoch `epoch`.
    pub fn fires_at(&self, epoch: usize) -> bool {
        self.enabled
            && self.check_every > 0
            && epoch % self.check_every == 0
            && (self.repeat || epoch == self.check_every)
    }
}

/// `β₂·up` if `ece > ece_hi`, `β₂·down` if `ece < ece_lo`, else `β₂`.
pub fn beta2_feedback(beta2: f64, ece: f64, fb: &Feedback) -> f64 {
    if ece > fb.ece_hi {
        beta2 * fb.up
    } else if ece < fb.ece_lo {
        beta2 * fb.down
    } else {
        beta2
    }
}

/// Target share of each auxiliary term relative to the NLL at step 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupRatios {
    pub sharp: f64,
    pub calib: f64,
}

/// `β = ratio · nll / aux` per auxiliary term; a term that is exactly zero
/// leaves its β unchanged.
pub fn warmup_scales(b: &LossBreakdown, ratios: WarmupRatios, beta1: f64, beta2: f64) -> (f64, f64) {
    let scale = |ratio: f64, aux: f64, beta: f64| if aux > 0.0 { ratio * b.nll / aux } else { beta };
    (scale(ratios.sharp, b.sharp, beta1), scale(ratios.calib, b.calib, beta2))
}

/// One pass with both auxiliary weights at zero, in evaluation mode, then
/// [`warmup_scales`].
pub fn calibration_warmup(
    bundle: &DatasetBundle,
    input: &ModelInput,
    params: &ModelParams,
    hyper: &HyperParams,
    ratios: WarmupRatios,
) -> Result<(f64, f64)> {
    let train = bundle.mask(Role::Train);
    let mut trace = forward_on_tape(input, params, hyper.ablate, hyper.temp_start, Mode::Eval, None)?;
    let (_, b) = composite_on_tape(
        &mut trace.tape,
        trace.probs,
        trace.u_final,
        &bundle.labels,
        &train,
        0.0,
        0.0,
        hyper.tau_calib,
    )?;
    Ok(warmup_scales(&b, ratios, hyper.beta1, hyper.beta2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub patience: usize,
    pub feedback: Feedback,
    pub clip_norm: f64,
    pub init: InitConfig,
    pub warmup: Option<WarmupRatios>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hyper: HyperParams::default(),
            patience: 50,
            feedback: Feedback::default(),
            clip_norm: 5.0,
            init: InitConfig::default(),
            warmup: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.patience < 1 {
            return Err(Error::config("patience must be >= 1"));
        }
        let fb = &self.feedback;
        if !(fb.up > 1.0 && fb.down > 0.0 && fb.down < 1.0) {
            return Err(Error::config(format!(
                "need up > 1 > down > 0, got {} and {}",
                fb.up, fb.down
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub nll: f64,
    pub sharp: f64,
    pub calib: f64,
    pub total: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Validation ECE.
    pub ece: f64,
    pub mean_u_local: f64,
    pub mean_u_comm: Option<f64>,
    pub u_global: Option<f64>,
    pub temperature: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub val_ece: f64,
    pub test_ece: f64,
}

fn score(bundle: &DatasetBundle, probs: &Tensor) -> Result<Evaluation> {
    let (tr, va, te) = (
        bundle.mask(Role::Train),
        bundle.mask(Role::Val),
        bundle.mask(Role::Test),
    );
    Ok(Evaluation {
        train_acc: accuracy(probs, &bundle.labels, &tr)?,
        val_acc: accuracy(probs, &bundle.labels, &va)?,
        test_acc: accuracy(probs, &bundle.labels, &te)?,
        val_ece: ece(probs, &bundle.labels, &va, ECE_BINS)?.ece,
        test_ece: ece(probs, &bundle.labels, &te, ECE_BINS)?.ece,
    })
}

/// Evaluation-mode forward pass and its scores.
pub fn evaluate(
    bundle: &DatasetBundle,
    input: &ModelInput,
    params: &ModelParams,
    hyper: &HyperParams,
) -> Result<(Evaluation, ModelState)> {
    let state = forward(input, params, hyper.ablate, hyper.temp_end, Mode::Eval)?;
    Ok((score(bundle, &state.probs)?, state))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation accuracy.
    pub params: ModelParams,
    pub init: InitClassifier,
    pub u0: Vec<f64>,
    pub history: Vec<MetricsRecord>,
    pub best_epoch: usize,
    /// Scores of the best parameters.
    pub best: Evaluation,
    /// Scores of the freshly initialized model, before any update.
    pub initial: Evaluation,
    pub beta1: f64,
    pub beta2: f64,
    pub communities: usize,
}

/// Trains on `bundle`, calling `on_epoch` after every epoch.
pub fn train(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let hyper = &cfg.hyper;
    let start = Instant::now();
    let input = ModelInput::new(bundle, hyper);
    let root = Rng::new(hyper.seed);
    let (n, d, c) = (bundle.n(), input.x.cols(), bundle.num_classes);
    let m = hyper.num_communities(n);
    let train_idx = bundle.mask(Role::Train);
    if train_idx.is_empty() {
        return Err(Error::contract("bundle has no train nodes"));
    }

    let (init, u0) = init_uncertainty(bundle, &input.x, &cfg.init, &root)?;
    let mut params = ModelParams::init(&root, d, hyper.hidden_dim, hyper.layers, m, c);
    params.set_trainable(hyper.ablate);
    let mut adam = AdamState::new(params.tensors(), hyper.lr, hyper.weight_decay);

    let (initial, _) = evaluate(bundle, &input, &params, hyper)?;

    let (mut beta1, mut beta2) = (hyper.beta1, hyper.beta2);
    if let Some(r) = cfg.warmup {
        (beta1, beta2) = calibration_warmup(bundle, &input, &params, hyper, r)?;
    }
    // Without the uncertainty path the auxiliary terms only act on the
    // frozen uncertainty map.
    let aux_on = !hyper.ablate.uncertainty;

    let mut history = Vec::new();
    let mut best_params = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    for epoch in 0..hyper.epochs {
        let temperature = hyper.temperature(epoch, hyper.epochs);
        let noise = Noise::draw(
            &root.child_indexed("step", epoch as u64),
            n,
            m,
            hyper.hidden_dim,
            hyper.layers,
            hyper.dropout,
        );
        let mut trace = forward_on_tape(&input, &params, hyper.ablate, temperature, Mode::Train(&noise), None)?;
        let (b1, b2) = if aux_on { (beta1, beta2) } else { (0.0, 0.0) };
        let (loss, parts) = composite_on_tape(
            &mut trace.tape,
            trace.probs,
            trace.u_final,
            &bundle.labels,
            &train_idx,
            b1,
            b2,
            hyper.tau_calib,
        )?;
        if !parts.total.is_finite() {
            let dump = format!(
                "epoch {epoch}: loss {parts:?}, temperature {temperature}, params finite: {}, mean u {}",
                params.is_finite(),
                trace.state.mean_u_local()
            );
            log::error!("{dump}");
            return Err(Error::NonFinite(dump));
        }
        let leaves = trace.leaves.clone();
        let grads = trace.tape.backward(loss)?;
        {
            let mut ps = params.tensors_mut();
            for (p, v) in ps.iter_mut().zip(&leaves) {
                if p.requires_grad {
                    p.set_grad(grads.tensor(*v).into_data())?;
                }
            }
            clip_grad_norm(&mut ps, cfg.clip_norm);
            adam.step(&mut ps)?;
        }

        let (ev, state) = evaluate(bundle, &input, &params, hyper)?;
        let done = epoch + 1;
        if cfg.feedback.fires_at(done) && aux_on {
            beta2 = beta2_feedback(beta2, ev.val_ece, &cfg.feedback);
        }
        let rec = MetricsRecord {
            epoch: done,
            nll: parts.nll,
            sharp: parts.sharp,
            calib: parts.calib,
            total: parts.total,
            train_acc: ev.train_acc,
            val_acc: ev.val_acc,
            test_acc: ev.test_acc,
            ece: ev.val_ece,
            mean_u_local: state.mean_u_local(),
            mean_u_comm: state.mean_u_comm(),
            u_global: state.global_u,
            temperature,
            beta1: b1,
            beta2: b2,
            seed: hyper.seed,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&rec)?;
        history.push(rec);

        if ev.val_acc > best_val {
            best_val = ev.val_acc;
            best_epoch = done;
            best_params = params.clone();
        } else if done - best_epoch >= cfg.patience {
            log::info!("early stop after epoch {done}; best epoch {best_epoch}");
            break;
        }
    }
    for t in best_params.tensors_mut() {
        t.zero_grad();
    }
    let (best, _) = evaluate(bundle, &input, &best_params, hyper)?;
    Ok(TrainOutcome {
        params: best_params,
        init,
        u0,
        history,
        best_epoch,
        best,
        initial,
        beta1,
        beta2,
        communities: m,
    })
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: MeanBaseline,
    pub best_epoch: usize,
    pub best: Evaluation,
}

/// Trains the mean-aggregation baseline on NLL with the same optimizer,
/// dropout and early-stopping rule.
pub fn train_mean_baseline(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<BaselineOutcome> {
    cfg.validate()?;
    let hyper = &cfg.hyper;
    let input = ModelInput::new(bundle, hyper);
    let root = Rng::new(hyper.seed);
    let train_idx = bundle.mask(Role::Train);
    let mut model = MeanBaseline::init(&root, input.x.cols(), hyper.hidden_dim, bundle.num_classes);
    let mut adam = AdamState::new([&model.w1, &model.w2], hyper.lr, hyper.weight_decay);
    let mut best = (f64::NEG_INFINITY, 0usize, model.clone());
    for epoch in 0..hyper.epochs {
        let noise = Noise::draw(
            &root.child_indexed("step", epoch as u64),
            bundle.n(),
            1,
            hyper.hidden_dim,
            2,
            hyper.dropout,
        );
        let mut trace = model.record(&input, Some(&noise.dropout[0]))?;
        let loss = nll_on_tape(&mut trace.tape, trace.probs, &bundle.labels, &train_idx)?;
        if !trace.tape.value(loss).item().is_finite() {
            return Err(Error::NonFinite(format!("baseline loss at epoch {epoch}")));
        }
        let leaves = trace.leaves;
        let grads = trace.tape.backward(loss)?;
        let mut ps = [&mut model.w1, &mut model.w2];
        for (p, v) in ps.iter_mut().zip(&leaves) {
            p.set_grad(grads.tensor(*v).into_data())?;
        }
        clip_grad_norm(&mut ps, cfg.clip_norm);
        adam.step(&mut ps)?;

        let probs = model.predict(&input)?;
        let val = accuracy(&probs, &bundle.labels, &bundle.mask(Role::Val))?;
        let done = epoch + 1;
        if val > best.0 {
            best = (val, done, model.clone());
        } else if done - best.1 >= cfg.patience {
            break;
        }
    }
    let probs = best.2.predict(&input)?;
    Ok(BaselineOutcome {
        best: score(bundle, &probs)?,
        model: best.2,
        best_epoch: best.1,
    })
}

/// A checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub params: ModelParams,
    pub init: Option<InitClassifier>,
    pub hyper: HyperParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHyper {
    hyper: HyperParams,
    communities: usize,
    input_dim: usize,
    num_classes: usize,
}

pub fn save_model(dir: &Path, params: &ModelParams, init: Option<&InitClassifier>, hyper: &HyperParams) -> Result<()> {
    let mut named = params.named();
    if let Some(i) = init {
        named.extend(i.named());
    }
    let meta = CheckpointHyper {
        hyper: hyper.clone(),
        communities: params.communities(),
        input_dim: params.w_o[0].rows(),
        num_classes: params.w_f.cols(),
    };
    let value = serde_json::to_value(&meta).map_err(|e| Error::json(dir, e))?;
    checkpoint::save(dir, &named, hyper.seed, value)
}

pub fn load_model(dir: &Path) -> Result<SavedModel> {
    let ck = checkpoint::load(dir)?;
    let meta: CheckpointHyper = serde_json::from_value(ck.manifest.hyperparameters.clone())
        .map_err(|e| Error::json(dir.join(checkpoint::MANIFEST), e))?;
    let params = ModelParams::from_checkpoint(&ck, meta.hyper.layers, meta.hyper.ablate)?;
    let init = match (
        ck.get("init.w1"),
        ck.get("init.b1"),
        ck.get("init.w2"),
        ck.get("init.b2"),
    ) {
        (Some(w1), Some(b1), Some(w2), Some(b2)) => Some(InitClassifier {
            w1: w1.clone(),
            b1: b1.clone(),
            w2: w2.clone(),
            b2: b2.clone(),
        }),
        _ => None,
    };
    Ok(SavedModel {
        params,
        init,
        hyper: meta.hyper,
    })
}

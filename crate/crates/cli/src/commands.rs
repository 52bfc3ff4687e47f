use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hugnn::eval::{
    check_hyper, contraction_probe, feature_pgd, model_check, op_checks, perturb, six_node_bundle, summarize,
    theorem3_experiment, PerturbKind, PerturbSpec, ProbeMap, Theorem3Config, Variant, CSV_HEADER,
};
use hugnn::graph::{load_bundle, save_bundle, synth_heterophily, DatasetBundle, SynthSpec};
use hugnn::math::Rng;
use hugnn::model::{Ablation, HyperParams, Mix, ModelInput, ModelParams};
use hugnn::train::{evaluate, load_model, save_model, train, Evaluation, TrainConfig, WarmupRatios};
use hugnn::{Error, Result};

use crate::{CheckArgs, Command, EvalArgs, HeterophilyArgs, HyperArgs, PerturbArgs, SweepArgs, SynthArgs, TrainArgs};

/// Everything needed to rerun a command; saved as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub data: PathBuf,
    pub out: PathBuf,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2_grid: Option<Vec<f64>>,
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Perturb(a) => perturb_cmd(a),
        Command::Check(a) => check_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Heterophily(a) => heterophily_cmd(a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn to_line(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

/// `HUGNN_THREADS`, else the machine's parallelism.
fn threads() -> usize {
    std::env::var("HUGNN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&t: &usize| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

impl HyperArgs {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        let h = &mut cfg.hyper;
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    h.$field = v;
                }
            )*};
        }
        set!(
            hidden_dim,
            layers,
            temp_start,
            temp_end,
            dropout,
            tau_calib,
            beta1,
            beta2,
            lr,
            weight_decay,
            epochs,
            seed,
            row_normalize
        );
        if let Some(c) = self.communities {
            h.communities = Some(c);
        }
        if let Some(a) = &self.ablate {
            h.ablate = a.parse::<Ablation>()?;
        }
        if let Some(m) = &self.mix {
            h.mix = m.parse::<Mix>()?;
        }
        if let Some(p) = self.patience {
            cfg.patience = p;
        }
        if self.no_feedback {
            cfg.feedback.enabled = false;
        }
        if let Some(r) = self.warmup_ratio {
            cfg.warmup = Some(WarmupRatios { sharp: r, calib: r });
        }
        if let Some(e) = self.init_epochs {
            cfg.init.epochs = e;
        }
        cfg.validate()
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n: a.n,
        num_classes: a.classes,
        degree: a.degree,
        p: a.p,
        feature_noise: a.feature_noise,
    };
    spec.validate()?;
    let bundle = synth_heterophily(&spec, &Rng::new(a.seed))?;
    save_bundle(&a.out, &bundle)?;
    println!("{}", to_line(&bundle.meta()));
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut rc = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|source| Error::Json {
                path: p.clone(),
                source,
            })?
        }
        None => RunConfig {
            command: "train".into(),
            data: PathBuf::new(),
            out: PathBuf::new(),
            train: TrainConfig::default(),
            beta1_grid: None,
            beta2_grid: None,
        },
    };
    if let Some(d) = a.data {
        rc.data = d;
    }
    if let Some(o) = a.out {
        rc.out = o;
    }
    if rc.data.as_os_str().is_empty() || rc.out.as_os_str().is_empty() {
        return Err(Error::Config(
            "train needs --data and --out (or a --config naming them)".into(),
        ));
    }
    a.hyper.apply(&mut rc.train)?;
    rc.command = "train".into();

    let bundle = load_bundle(&rc.data)?;
    let out = &rc.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("config.json"), &rc)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let outcome = train(&bundle, &rc.train, &mut |rec| {
        writeln!(metrics, "{}", to_line(rec)).map_err(io_err(&metrics_path))
    })?;
    metrics.flush().map_err(io_err(&metrics_path))?;

    save_model(
        &out.join("ckpt-best"),
        &outcome.params,
        Some(&outcome.init),
        &rc.train.hyper,
    )?;
    let input = ModelInput::new(&bundle, &rc.train.hyper);
    let (_, mut state) = evaluate(&bundle, &input, &outcome.params, &rc.train.hyper)?;
    state.u0 = Some(outcome.u0.clone());
    write_json(&out.join("nodes.json"), &state.export_json())?;
    let summary = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
        "communities": outcome.communities,
        "best": outcome.best,
        "initial": outcome.initial,
        "beta1": outcome.beta1,
        "final_beta2": outcome.history.last().map(|r| r.beta2),
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", to_line(&summary));
    Ok(())
}

fn score(bundle: &DatasetBundle, input: &ModelInput, params: &ModelParams, hyper: &HyperParams) -> Result<Evaluation> {
    Ok(evaluate(bundle, input, params, hyper)?.0)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let saved = load_model(&a.ckpt)?;
    let bundle = load_bundle(&a.data)?;
    let input = ModelInput::new(&bundle, &saved.hyper);
    let (ev, mut state) = evaluate(&bundle, &input, &saved.params, &saved.hyper)?;
    if let Some(path) = a.export {
        if let Some(clf) = &saved.init {
            state.u0 = Some(clf.uncertainty(&input.x)?);
        }
        write_json(&path, &state.export_json())?;
    }
    println!("{}", to_line(&ev));
    Ok(())
}

fn perturb_cmd(a: PerturbArgs) -> Result<()> {
    let kind: PerturbKind = a.kind.parse()?;
    let spec = PerturbSpec {
        kind,
        intensity: a.intensity,
        seed: a.seed,
    };
    spec.validate()?;
    let saved = load_model(&a.ckpt)?;
    let bundle = load_bundle(&a.data)?;
    let ev = if a.pgd {
        if kind != PerturbKind::FeatureNoise {
            return Err(Error::Config("--pgd only applies to feature_noise".into()));
        }
        log::info!(
            "feature perturbation by 5 projected gradient steps, eps {}",
            a.intensity
        );
        let input = feature_pgd(&bundle, &saved.params, &saved.hyper, a.intensity, 5)?;
        score(&bundle, &input, &saved.params, &saved.hyper)?
    } else {
        if kind == PerturbKind::GreedyFlip {
            log::info!("greedy cross-class edge insertion (a surrogate structure attack)");
        }
        let corrupted = perturb(&bundle, &spec)?;
        if let Some(dir) = &a.save {
            save_bundle(dir, &corrupted)?;
        }
        let input = ModelInput::new(&corrupted, &saved.hyper);
        score(&corrupted, &input, &saved.params, &saved.hyper)?
    };
    println!("{}", to_line(&ev));
    Ok(())
}

pub const OP_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

fn check_cmd(a: CheckArgs) -> Result<()> {
    let ops = op_checks(a.seed)?;
    let worst_op = ops
        .iter()
        .max_by(|x, y| x.max_rel_error.total_cmp(&y.max_rel_error))
        .expect("at least one op");
    let op_ok = worst_op.max_rel_error < OP_TOL;
    println!(
        "op-check {} ops={} max_rel_error={:e} worst={}",
        if op_ok { "pass" } else { "FAIL" },
        ops.len(),
        worst_op.max_rel_error,
        worst_op.op
    );
    let bundle6 = six_node_bundle(a.seed);
    let mc = model_check(&bundle6, &check_hyper(a.seed, Ablation::NONE))?;
    let model_ok = mc.max_rel_error < MODEL_TOL;
    println!(
        "grad-check {} params={} max_rel_error={:e}",
        if model_ok { "pass" } else { "FAIL" },
        mc.params.len(),
        mc.max_rel_error
    );

    if let Some(data) = &a.data {
        let bundle = load_bundle(data)?;
        let map = if a.reference {
            ProbeMap::reference(&bundle.graph, a.self_loops)
        } else {
            let (params, hyper) = match &a.ckpt {
                Some(c) => {
                    let s = load_model(c)?;
                    (s.params, s.hyper)
                }
                None => {
                    let hyper = HyperParams {
                        seed: a.seed,
                        ..HyperParams::default()
                    };
                    let input = ModelInput::new(&bundle, &hyper);
                    let m = hyper.num_communities(bundle.n());
                    let p = ModelParams::init(
                        &Rng::new(a.seed),
                        input.x.cols(),
                        hyper.hidden_dim,
                        hyper.layers,
                        m,
                        bundle.num_classes,
                    );
                    (p, hyper)
                }
            };
            ProbeMap::full(&ModelInput::new(&bundle, &hyper), &params, &hyper)?
        };
        let report = contraction_probe(&map, a.trials, a.iters, a.seed)?;
        let ok = report.trials.iter().filter(|t| t.converged).count();
        println!(
            "probe {:?} converged={}/{} max_iterations={} max_lipschitz={}",
            report.mode,
            ok,
            report.trials.len(),
            report.trials.iter().map(|t| t.iterations).max().unwrap_or(0),
            report.max_lipschitz
        );
        if let Some(out) = &a.out {
            write_json(out, &report)?;
        }
    }
    if !(op_ok && model_ok) {
        return Err(Error::Domain {
            op: "gradient check",
            detail: "finite differences disagree with the reverse pass".into(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    beta1: f64,
    beta2: f64,
    best_epoch: usize,
    val_acc: f64,
    test_acc: f64,
    val_ece: f64,
    test_ece: f64,
    /// Not beaten on both validation accuracy and validation ECE.
    frontier: bool,
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let mut base = TrainConfig::default();
    a.hyper.apply(&mut base)?;
    if a.beta1_grid.is_empty() || a.beta2_grid.is_empty() {
        return Err(Error::Config("empty β grid".into()));
    }
    let bundle = load_bundle(&a.data)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let rc = RunConfig {
        command: "sweep".into(),
        data: a.data.clone(),
        out: a.out.clone(),
        train: base.clone(),
        beta1_grid: Some(a.beta1_grid.clone()),
        beta2_grid: Some(a.beta2_grid.clone()),
    };
    write_json(&a.out.join("config.json"), &rc)?;

    let grid: Vec<(f64, f64)> = a
        .beta1_grid
        .iter()
        .flat_map(|&b1| a.beta2_grid.iter().map(move |&b2| (b1, b2)))
        .collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<(usize, Evaluation)>>>> =
        grid.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads().min(grid.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(&(b1, b2)) = grid.get(k) else { break };
                let mut cfg = base.clone();
                cfg.hyper.beta1 = b1;
                cfg.hyper.beta2 = b2;
                let r = train(&bundle, &cfg, &mut |_| Ok(())).map(|o| (o.best_epoch, o.best));
                *results[k].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    let mut rows = Vec::with_capacity(grid.len());
    for (&(b1, b2), slot) in grid.iter().zip(results) {
        let (best_epoch, ev) = slot.into_inner().expect("unpoisoned").expect("every point ran")?;
        rows.push(SweepRow {
            beta1: b1,
            beta2: b2,
            best_epoch,
            val_acc: ev.val_acc,
            test_acc: ev.test_acc,
            val_ece: ev.val_ece,
            test_ece: ev.test_ece,
            frontier: false,
        });
    }
    for k in 0..rows.len() {
        let (acc, ece) = (rows[k].val_acc, rows[k].val_ece);
        rows[k].frontier = !rows
            .iter()
            .any(|o| o.val_acc >= acc && o.val_ece <= ece && (o.val_acc > acc || o.val_ece < ece));
    }
    let path = a.out.join("sweep.csv");
    let mut text = String::from("beta1,beta2,best_epoch,val_acc,test_acc,val_ece,test_ece,frontier\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.beta1, r.beta2, r.best_epoch, r.val_acc, r.test_acc, r.val_ece, r.test_ece, r.frontier
        ));
    }
    fs::write(&path, text).map_err(io_err(&path))?;
    for r in &rows {
        println!("{}", to_line(r));
    }
    Ok(())
}

fn heterophily_cmd(a: HeterophilyArgs) -> Result<()> {
    let mut cfg = Theorem3Config {
        n: a.n,
        num_classes: a.classes,
        degree: a.degree,
        feature_noise: a.feature_noise,
        p_grid: a.p.clone(),
        seeds: (0..a.seeds).collect(),
        variants: a.variants.iter().map(|v| v.parse::<Variant>()).collect::<Result<_>>()?,
        ..Theorem3Config::default()
    };
    a.hyper.apply(&mut cfg.train)?;
    let rows = theorem3_experiment(&cfg, threads())?;
    let mut text = format!("{CSV_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&a.out, text).map_err(io_err(&a.out))?;
    for s in summarize(&rows) {
        println!("{}", to_line(&s));
    }
    Ok(())
}

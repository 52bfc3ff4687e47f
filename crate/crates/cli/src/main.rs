use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "hugnn",
    version,
    about = "Hierarchical uncertainty-gated GNN: train, evaluate, attack, check"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a generated graph of controlled heterophily as a bundle.
    Synth(SynthArgs),
    /// Train on a bundle; writes config.json, metrics.jsonl, ckpt-best/.
    Train(TrainArgs),
    /// Score a checkpoint on a bundle; prints JSON.
    Eval(EvalArgs),
    /// Corrupt a bundle, then score a checkpoint on it; prints JSON.
    Perturb(PerturbArgs),
    /// Gradient check and uncertainty fixed-point probe.
    Check(CheckArgs),
    /// Train over a grid of loss weights; writes the accuracy/ECE frontier.
    Sweep(SweepArgs),
    /// Variant comparison on generated heterophilic graphs; writes CSV.
    Heterophily(HeterophilyArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    degree: usize,
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 1.0)]
    feature_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides for every model and training setting. Unset flags keep the
/// value from `--config`, or the default.
#[derive(Debug, Args, Default, Clone)]
struct HyperArgs {
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    communities: Option<usize>,
    #[arg(long)]
    temp_start: Option<f64>,
    #[arg(long)]
    temp_end: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    tau_calib: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of community, global, uncertainty, or "none".
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    row_normalize: Option<bool>,
    /// Local combination rule: cosine (default) or low_pass.
    #[arg(long)]
    mix: Option<String>,
    #[arg(long)]
    patience: Option<usize>,
    /// Turn the ECE-driven β₂ controller off.
    #[arg(long)]
    no_feedback: bool,
    /// Scale β₁, β₂ so each term starts at this fraction of the NLL.
    #[arg(long)]
    warmup_ratio: Option<f64>,
    #[arg(long)]
    init_epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// A config.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write per-node uncertainty, fusion weights and community ids.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// drop_edge, feature_noise or greedy_flip.
    #[arg(long)]
    kind: String,
    /// Edge ratio or relative feature norm ε.
    #[arg(long, alias = "ratio", alias = "eps")]
    intensity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// With feature_noise: gradient steps on the model's own loss instead
    /// of a random direction.
    #[arg(long)]
    pgd: bool,
    /// Write the corrupted bundle here.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Bundle for the fixed-point probe; skipped when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Probe a trained model instead of a fresh one.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Probe neighbor averaging instead of the model.
    #[arg(long)]
    reference: bool,
    #[arg(long)]
    self_loops: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the probe report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 1.0])]
    beta1_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.1, 0.2])]
    beta2_grid: Vec<f64>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug, Args)]
struct HeterophilyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2])]
    p: Vec<f64>,
    /// Seeds 0..N.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["full".to_string(), "flat".into(), "nouncert".into(), "mean".into()])]
    variants: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    degree: usize,
    #[arg(long, default_value_t = 1.0)]
    feature_noise: f64,
    #[command(flatten)]
    hyper: HyperArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end. Each subcommand maps onto one [`crate::pipeline`] stage.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::datagen::{Quality, Split, DEFAULT_TRAJECTORIES};
use crate::dynmodel::ModelTrainConfig;
use crate::envsuite::Family;
use crate::error::{GentleError, Result};
use crate::evalkit::{Protocol, DEFAULT_CONTEXT_SIZE, DEFAULT_EPISODES};
use crate::pipeline::{self, AblateSettings, ContextSource, DiagSettings, EvalSettings, GenDataConfig, PretrainConfig, Sweep, TrainPaths};
use crate::trainer::TrainConfig;

pub const THREADS_ENV: &str = "GENTLE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gentle", version, about = "Offline meta-RL with task auto-encoders and relabeled probing data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect scripted-policy datasets into <out>/<family>/<quality>.
    GenData(GenDataArgs),
    /// Fit one dynamics/reward ensemble per training task.
    Pretrain(PretrainArgs),
    /// Meta-train the auto-encoder and policy.
    Train(TrainArgs),
    /// Evaluate a trained run under the given-context and/or one-shot protocol.
    Eval(EvalArgs),
    /// Run a named ablation sweep (train + test evaluation per point and replicate).
    Ablate(AblateArgs),
    /// Task-identification diagnostics of the learned representations.
    Diag(DiagArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "point-robot")]
    pub family: Family,
    #[arg(long, default_value = "expert")]
    pub quality: Quality,
    #[arg(long, default_value_t = 10)]
    pub n_train_tasks: usize,
    #[arg(long, default_value_t = 10)]
    pub n_test_tasks: usize,
    #[arg(long, default_value_t = DEFAULT_TRAJECTORIES)]
    pub n_traj: usize,
    /// Root seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset root directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset directory (<root>/<family>/<quality>).
    #[arg(long)]
    pub data: PathBuf,
    /// JSON model-training config; defaults to the family recipe.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "models")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat JSON training config; every key is required.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, default_value = "desk", value_parser = ["desk", "published"])]
    pub preset: String,
    /// Override one config key, e.g. `--set epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory the policy learns from.
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset directory for contexts and relabeling (same tasks); defaults to --data.
    #[arg(long)]
    pub context_data: Option<PathBuf>,
    /// Pretrained models directory; required for learned-model relabeling.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory; its expert pools feed the given-context protocol.
    #[arg(long)]
    pub data: PathBuf,
    /// `given`, `one-shot` or `both`.
    #[arg(long, default_value = "both")]
    pub protocol: String,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    pub episodes: usize,
    #[arg(long, default_value_t = DEFAULT_CONTEXT_SIZE)]
    pub context_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// ratio, task-count, diversity or variant.
    #[arg(long)]
    pub sweep: Sweep,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset root holding <family>/<quality> directories.
    #[arg(long, default_value = "data")]
    pub data_root: PathBuf,
    /// Pretrained models for the expert datasets; fitted in-process when absent.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long, default_value = "point-robot")]
    pub family: Family,
    /// Independent training seeds per sweep point.
    #[arg(long, default_value_t = 3)]
    pub replicates: usize,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/ablate")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// `one-shot` (zero-prior exploration episodes) or `dataset` (offline batches).
    #[arg(long, default_value = "one-shot")]
    pub contexts: ContextSource,
    #[arg(long, default_value_t = 10)]
    pub resamples: usize,
    #[arg(long, default_value_t = DEFAULT_CONTEXT_SIZE)]
    pub context_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/diag")]
    pub out: PathBuf,
}

fn read_file(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => GentleError::MissingInput(path.clone()),
        _ => GentleError::config(format!("cannot read {}: {e}", path.display())),
    })
}

/// Parses `KEY=VALUE`; the value is read as JSON, falling back to a string.
fn apply_override(doc: &mut serde_json::Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| GentleError::config(format!("override `{item}` is not KEY=VALUE")))?;
    let obj = doc.as_object_mut().ok_or_else(|| GentleError::config("config must be a JSON object"))?;
    if !obj.contains_key(key) {
        return Err(GentleError::config(format!("unknown config key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    obj.insert(key.to_string(), value);
    Ok(())
}

/// Config file (or preset), then `--set` overrides, then the seed flag.
pub fn resolve_config(args: &ConfigArgs, family: Family, seed: Option<u64>) -> Result<TrainConfig> {
    let mut doc: serde_json::Value = match &args.config {
        Some(path) => serde_json::from_str(&read_file(path)?).map_err(|e| GentleError::config(format!("config: {e}")))?,
        None => {
            let preset = match args.preset.as_str() {
                "published" => TrainConfig::published(family),
                _ => TrainConfig::desk(family),
            };
            serde_json::to_value(preset).expect("preset serializes")
        }
    };
    for item in &args.overrides {
        apply_override(&mut doc, item)?;
    }
    if let Some(seed) = seed {
        apply_override(&mut doc, &format!("seed={seed}"))?;
    }
    TrainConfig::from_json(&doc.to_string())
}

fn parse_protocols(s: &str) -> Result<Vec<Protocol>> {
    if s == "both" {
        Ok(vec![Protocol::GivenContext, Protocol::OneShot])
    } else {
        Ok(vec![s.parse()?])
    }
}

/// Installs the global worker pool sized by `GENTLE_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| GentleError::config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| GentleError::config(format!("cannot size the worker pool: {e}")))
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData(a) => {
            let cfg = GenDataConfig {
                family: a.family,
                quality: a.quality,
                n_train_tasks: a.n_train_tasks,
                n_test_tasks: a.n_test_tasks,
                n_traj: a.n_traj,
                seed: a.seed,
            };
            let dir = pipeline::gen_data(&cfg, &a.out)?;
            println!("datasets written to {}", dir.display());
        }
        Command::Pretrain(a) => {
            let family = pipeline::load_collection(&a.data)?.family();
            let model = match &a.config {
                Some(path) => serde_json::from_str(&read_file(path)?).map_err(|e| GentleError::config(format!("model config: {e}")))?,
                None => ModelTrainConfig::for_family(family),
            };
            let models = pipeline::pretrain(&a.data, &PretrainConfig { model, seed: a.seed }, &a.out)?;
            for m in &models {
                let best: Vec<String> = m.reports.iter().map(|r| format!("{:.2e}", r.best_holdout_mse)).collect();
                println!("task {:03}: holdout mse per member [{}]", m.task_id, best.join(", "));
            }
        }
        Command::Train(a) => {
            let family = pipeline::load_collection(&a.data)?.family();
            let cfg = resolve_config(&a.config, family, a.seed)?;
            let paths = TrainPaths {
                data: a.data,
                context_data: a.context_data,
                models: a.models,
            };
            let started = Instant::now();
            let quiet = a.quiet;
            pipeline::train_observed(&cfg, &paths, &a.out, |rows| {
                if !quiet {
                    let parts: Vec<String> = rows.iter().map(|r| format!("{}={:.4}", r.metric, r.value)).collect();
                    eprintln!("epoch {} [{:.0}s] {}", rows[0].epoch, started.elapsed().as_secs_f64(), parts.join(" "));
                }
            })?;
            println!("run written to {} ({:.2}% of the published step budget)", a.out.display(), 100.0 * cfg.budget_fraction());
        }
        Command::Eval(a) => {
            let settings = EvalSettings {
                protocols: parse_protocols(&a.protocol)?,
                split: a.split,
                episodes: a.episodes,
                context_size: a.context_size,
                seed: a.seed,
            };
            let out = pipeline::eval(&a.run, &a.data, &settings, &a.out)?;
            for r in &out.reports {
                let frac = out.normalized(r.protocol).unwrap_or(f64::NAN);
                println!("{} {}: {:.3} ± {:.3} (normalized {:.3})", r.split.name(), r.protocol, r.mean, r.std, frac);
            }
            println!("references: expert {:.3}, random {:.3}", out.expert_mean, out.random_mean);
        }
        Command::Ablate(a) => {
            let base = resolve_config(&a.config, a.family, None)?;
            let settings = AblateSettings {
                sweep: a.sweep,
                base,
                replicates: a.replicates,
                episodes: a.episodes,
                seed: a.seed,
            };
            let rows = pipeline::ablate(&settings, &a.data_root, a.models.as_deref(), &a.out)?;
            for r in &rows {
                println!("{} seed {} {}: {:.3}", r.point, r.replicate, r.protocol, r.mean);
            }
        }
        Command::Diag(a) => {
            let settings = DiagSettings {
                split: a.split,
                source: a.contexts,
                resamples: a.resamples,
                context_size: a.context_size,
                seed: a.seed,
            };
            let out = pipeline::diag(&a.run, &a.data, &settings, &a.out)?;
            println!(
                "k-NN accuracy {:.3} (random-init encoder {:.3}){}",
                out.knn_accuracy,
                out.random_init_knn_accuracy,
                if out.degenerate { ", degenerate projection" } else { "" }
            );
        }
    }
    Ok(())
}

/// Parses `argv`, runs, and maps the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! File-level pipeline stages shared by the CLI and the FFI layer: each stage
//! reads artifacts from disk, runs one step and writes its outputs plus a
//! run manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{DatasetCollection, Quality, Split, TaskDataset};
use crate::dynmodel::{model_dir, train_task_model, EnsembleModel, LabelModel, ModelTrainConfig};
use crate::envsuite::{Family, TaskSpec};
use crate::error::{GentleError, Result};
use crate::evalkit::{self, EvalConfig, EvalReport, MetricRow, Protocol, RepRow, KNN_K};
use crate::numkit::Rng;
use crate::offpolicy::ActorCritic;
use crate::relabel::AugmentConfig;
use crate::tae::{Latent, TaePair};
use crate::trainer::{self, load_tae, save_tae, RunArtifacts, TrainConfig, TrainInputs, Variant};

pub const RUN_SCHEMA_VERSION: u32 = 1;
pub const RUN_MANIFEST: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPS_FILE: &str = "reps.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Record of one subcommand invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub seed: u64,
    /// Produced files, relative to the output directory.
    pub artifacts: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new<C: Serialize>(subcommand: &str, config: &C, seed: u64) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        RunManifest {
            schema_version: RUN_SCHEMA_VERSION,
            subcommand: subcommand.to_string(),
            config_sha256: config_hash(&config),
            config,
            seed,
            artifacts: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn write(mut self, dir: &Path, started: Instant) -> Result<Self> {
        self.artifacts.sort();
        self.artifacts.dedup();
        for a in &self.artifacts {
            if !dir.join(a).exists() {
                return Err(GentleError::format(dir.join(a), "listed artifact was not produced"));
            }
        }
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| GentleError::io(&path, e))?;
        Ok(self)
    }
}

/// SHA-256 of the compact JSON form; object keys serialize in sorted order.
pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GentleError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GentleError::io(path, e))
}

/// Relative paths of every file below `dir`, excluding the manifest.
fn files_below(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| GentleError::io(&d, e))? {
            let path = entry.map_err(|e| GentleError::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Ok(rel) = path.strip_prefix(dir) {
                let rel = rel.to_string_lossy().replace('\\', "/");
                if rel != RUN_MANIFEST {
                    out.push(rel);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub family: Family,
    pub quality: Quality,
    pub n_train_tasks: usize,
    pub n_test_tasks: usize,
    pub n_traj: usize,
    pub seed: u64,
}

/// Collects datasets into `<root>/<family>/<quality>` and returns that directory.
pub fn gen_data(cfg: &GenDataConfig, root: &Path) -> Result<PathBuf> {
    let started = Instant::now();
    if cfg.n_traj == 0 || cfg.n_train_tasks == 0 {
        return Err(GentleError::config("n_traj and n_train_tasks must be at least 1"));
    }
    let coll = DatasetCollection::generate(cfg.family, cfg.quality, cfg.n_train_tasks, cfg.n_test_tasks, cfg.n_traj, cfg.seed)?;
    let dir = DatasetCollection::dir_in(root, cfg.family, cfg.quality);
    coll.save(&dir)?;
    let mut manifest = RunManifest::new("gen-data", cfg, cfg.seed);
    manifest.artifacts = files_below(&dir)?;
    manifest.write(&dir, started)?;
    Ok(dir)
}

fn require_dataset(dir: &Path) -> Result<()> {
    let manifest = dir.join("manifest.json");
    if manifest.exists() {
        Ok(())
    } else {
        Err(GentleError::MissingInput(manifest))
    }
}

pub fn load_collection(dir: &Path) -> Result<DatasetCollection> {
    require_dataset(dir)?;
    DatasetCollection::load(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelTrainConfig,
    pub seed: u64,
}

/// Fits one ensemble per training task and saves them under `out`.
pub fn pretrain(data_dir: &Path, cfg: &PretrainConfig, out: &Path) -> Result<Vec<EnsembleModel>> {
    let started = Instant::now();
    let coll = load_collection(data_dir)?;
    let models = fit_models(&coll.train, &cfg.model, cfg.seed)?;
    create_dir(out)?;
    for m in &models {
        m.save(&model_dir(out, m.task_id))?;
    }
    let mut manifest = RunManifest::new("pretrain", cfg, cfg.seed);
    manifest.artifacts = files_below(out)?;
    manifest.write(out, started)?;
    Ok(models)
}

pub fn fit_models(datasets: &[TaskDataset], cfg: &ModelTrainConfig, seed: u64) -> Result<Vec<EnsembleModel>> {
    let model_seed = Rng::new(seed).named("model-init").named("dynamics").next_u64();
    datasets.par_iter().map(|d| train_task_model(d, cfg, model_seed)).collect()
}

/// Loads the models of the given tasks, in order.
pub fn load_models(dir: &Path, datasets: &[TaskDataset]) -> Result<Vec<LabelModel>> {
    datasets
        .iter()
        .map(|d| {
            let sub = model_dir(dir, d.task_id);
            if !sub.join("model.json").exists() {
                return Err(GentleError::MissingInput(sub.join("model.json")));
            }
            let m = EnsembleModel::load(&sub)?;
            if m.family != d.family() {
                return Err(GentleError::config(format!("model for task {} has the wrong family", d.task_id)));
            }
            Ok(LabelModel::Learned(m))
        })
        .collect()
}

/// Inputs of a training run.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub data: PathBuf,
    /// Separate context datasets over the same tasks (diversity sweep).
    pub context_data: Option<PathBuf>,
    pub models: Option<PathBuf>,
}

fn same_tasks(a: &DatasetCollection, b: &DatasetCollection) -> bool {
    let specs = |c: &DatasetCollection| -> Vec<(usize, TaskSpec)> { c.train.iter().map(|d| (d.task_id, d.spec.clone())).collect() };
    a.family() == b.family() && specs(a) == specs(b)
}

/// Runs meta-training from files and writes config, metrics, reps and snapshots into `out`.
pub fn train(cfg: &TrainConfig, paths: &TrainPaths, out: &Path) -> Result<RunArtifacts> {
    train_observed(cfg, paths, out, |_| {})
}

pub fn train_observed<F: FnMut(&[MetricRow])>(cfg: &TrainConfig, paths: &TrainPaths, out: &Path, observe: F) -> Result<RunArtifacts> {
    let started = Instant::now();
    cfg.validate()?;
    let data = load_collection(&paths.data)?;
    if data.family() != cfg.family {
        return Err(GentleError::config(format!(
            "config family `{}` does not match dataset family `{}`",
            cfg.family.name(),
            data.family().name()
        )));
    }
    let ctx = match &paths.context_data {
        Some(dir) => {
            let c = load_collection(dir)?;
            if !same_tasks(&data, &c) {
                return Err(GentleError::config("context data must cover the same training tasks as the RL data"));
            }
            Some(c)
        }
        None => None,
    };
    let ctx_train = ctx.as_ref().map_or(&data.train, |c| &c.train);
    if cfg.n_train_tasks > data.train.len() {
        return Err(GentleError::config(format!(
            "`n_train_tasks` = {} but the dataset has {} training tasks",
            cfg.n_train_tasks,
            data.train.len()
        )));
    }
    let needs_models = cfg.variant.relabels() && !cfg.oracle_model;
    let models = match (&paths.models, needs_models) {
        (Some(dir), true) => load_models(dir, &ctx_train[..cfg.n_train_tasks])?,
        (None, true) => {
            return Err(GentleError::config(
                "learned-model relabeling needs --models (or set oracle_model / variant no_relabel)",
            ))
        }
        (_, false) => Vec::new(),
    };
    let inputs = TrainInputs {
        rl_data: &data.train,
        context_data: ctx_train,
        models: &models,
    };
    let run = trainer::meta_train_observed(cfg, inputs, observe)?;
    write_run(cfg, &run, ctx_train, out, started)?;
    Ok(run)
}

fn write_run(cfg: &TrainConfig, run: &RunArtifacts, ctx: &[TaskDataset], out: &Path, started: Instant) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    evalkit::export_metrics(&run.metrics, &out.join(METRICS_FILE))?;
    let ids: Vec<usize> = ctx.iter().take(cfg.n_train_tasks).map(|d| d.task_id).collect();
    export_latents(&run.train_reps, &ids, Split::Train, &out.join(REPS_FILE))?;
    save_tae(&run.tae, &out.join("tae"))?;
    run.policy.save(&out.join("policy"))?;
    let mut manifest = RunManifest::new("train", cfg, cfg.seed);
    manifest.artifacts = files_below(out)?;
    manifest.write(out, started)?;
    Ok(())
}

/// Writes one reps row per latent with its PCA coordinates.
pub fn export_latents(latents: &[Latent], task_ids: &[usize], split: Split, path: &Path) -> Result<bool> {
    let points: Vec<&[f64]> = latents.iter().map(|z| z.as_slice()).collect();
    let (proj, degenerate) = evalkit::pca_projection(&points);
    let rows: Vec<RepRow> = latents
        .iter()
        .zip(task_ids)
        .zip(proj)
        .map(|((z, &task_id), proj)| RepRow {
            task_id,
            split: split.name().to_string(),
            z: z.0.clone(),
            proj,
        })
        .collect();
    let dim = latents.first().map_or(0, |z| z.dim());
    evalkit::export_reps(&rows, dim, path)?;
    Ok(degenerate)
}

/// A trained run loaded back from its output directory.
pub struct LoadedRun {
    pub config: TrainConfig,
    pub tae: TaePair,
    pub policy: ActorCritic,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| GentleError::io(&path, e))?;
    let config = TrainConfig::from_json(&text)?;
    let tae = load_tae(&dir.join("tae"))?;
    let policy = ActorCritic::load(&dir.join("policy"), &config.rl_config())?;
    Ok(LoadedRun { config, tae, policy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub protocols: Vec<Protocol>,
    pub split: Split,
    pub episodes: usize,
    pub context_size: usize,
    pub seed: u64,
}

/// Evaluation reports plus the per-task reference returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub reports: Vec<EvalReport>,
    pub expert_mean: f64,
    pub random_mean: f64,
}

impl EvalOutcome {
    pub fn report(&self, protocol: Protocol) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.protocol == protocol)
    }

    /// Where `protocol` lands between random (0) and expert (1).
    pub fn normalized(&self, protocol: Protocol) -> Option<f64> {
        self.report(protocol).map(|r| (r.mean - self.random_mean) / (self.expert_mean - self.random_mean))
    }
}

fn split_tasks(coll: &DatasetCollection, split: Split) -> &[TaskDataset] {
    match split {
        Split::Train => &coll.train,
        Split::Test => &coll.test,
    }
}

/// Evaluates a loaded policy on a dataset split.
pub fn evaluate_run(run: &LoadedRun, data: &DatasetCollection, settings: &EvalSettings) -> Result<EvalOutcome> {
    if settings.protocols.is_empty() {
        return Err(GentleError::config("at least one protocol is required"));
    }
    if data.family() != run.config.family {
        return Err(GentleError::config("evaluation data family differs from the trained run"));
    }
    let datasets = split_tasks(data, settings.split);
    if datasets.is_empty() {
        return Err(GentleError::config(format!("dataset has no {} tasks", settings.split.name())));
    }
    let tasks: Vec<(usize, TaskSpec)> = datasets.iter().map(|d| (d.task_id, d.spec.clone())).collect();
    let eval_cfg = EvalConfig {
        episodes: settings.episodes,
        context_size: settings.context_size,
    };
    let root = Rng::new(settings.seed).named("eval");
    let mut reports = Vec::new();
    for &p in &settings.protocols {
        let pools = match p {
            Protocol::GivenContext => {
                if data.manifest.quality != Quality::Expert {
                    return Err(GentleError::config("given-context evaluation needs an expert-quality dataset"));
                }
                Some(datasets)
            }
            Protocol::OneShot => None,
        };
        let seed = root.named(p.name()).next_u64();
        reports.push(evalkit::evaluate(p, settings.split, &run.policy, &run.tae, &tasks, pools, &eval_cfg, seed)?);
    }
    let ref_seed = root.named("references").next_u64();
    let refs: Vec<(f64, f64)> = tasks
        .iter()
        .map(|(id, spec)| evalkit::reference_returns(spec, settings.episodes, Rng::new(ref_seed).stream(*id as u64).next_u64()))
        .collect::<Result<_>>()?;
    let n = refs.len() as f64;
    Ok(EvalOutcome {
        reports,
        expert_mean: refs.iter().map(|r| r.0).sum::<f64>() / n,
        random_mean: refs.iter().map(|r| r.1).sum::<f64>() / n,
    })
}

/// Loads a run and data, evaluates, and writes metrics, reps and the full report.
pub fn eval(run_dir: &Path, data_dir: &Path, settings: &EvalSettings, out: &Path) -> Result<EvalOutcome> {
    let started = Instant::now();
    let run = load_run(run_dir)?;
    let data = load_collection(data_dir)?;
    let outcome = evaluate_run(&run, &data, settings)?;
    create_dir(out)?;
    let epoch = run.config.epochs.saturating_sub(1);
    let step = run.config.total_steps();
    let split = settings.split.name();
    let mut rows = Vec::new();
    for r in &outcome.reports {
        rows.push(MetricRow::new(epoch, step, split, &format!("return_{}", r.protocol.name()), r.mean));
        rows.push(MetricRow::new(epoch, step, split, &format!("return_{}_std", r.protocol.name()), r.std));
    }
    rows.push(MetricRow::new(epoch, step, split, "return_expert_ref", outcome.expert_mean));
    rows.push(MetricRow::new(epoch, step, split, "return_random_ref", outcome.random_mean));
    evalkit::export_metrics(&rows, &out.join(METRICS_FILE))?;
    // one-shot adaptation latents when available, else the given-context ones
    let shown = outcome.report(Protocol::OneShot).or(outcome.reports.first()).expect("non-empty");
    let latents: Vec<Latent> = shown.tasks.iter().map(|t| t.latent.clone()).collect();
    let ids: Vec<usize> = shown.tasks.iter().map(|t| t.task_id).collect();
    export_latents(&latents, &ids, settings.split, &out.join(REPS_FILE))?;
    write_text(&out.join("eval.json"), &serde_json::to_string_pretty(&outcome).expect("report serializes"))?;
    let mut manifest = RunManifest::new("eval", settings, settings.seed);
    manifest.artifacts = vec![METRICS_FILE.into(), REPS_FILE.into(), "eval.json".into()];
    manifest.write(out, started)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    /// Zero-prior exploration episodes of the trained policy.
    OneShot,
    /// Random batches from the offline datasets.
    Dataset,
}

impl FromStr for ContextSource {
    type Err = GentleError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "one_shot" | "oneshot" => Ok(ContextSource::OneShot),
            "dataset" => Ok(ContextSource::Dataset),
            other => Err(GentleError::config(format!("unknown context source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagSettings {
    pub split: Split,
    pub source: ContextSource,
    pub resamples: usize,
    pub context_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagOutcome {
    pub knn_accuracy: f64,
    /// Same diagnostic with a freshly initialized auto-encoder.
    pub random_init_knn_accuracy: f64,
    pub degenerate: bool,
}

pub fn diagnose_run(run: &LoadedRun, data: &DatasetCollection, settings: &DiagSettings) -> Result<(DiagOutcome, evalkit::RepDiagnostics)> {
    let datasets = split_tasks(data, settings.split);
    let tasks: Vec<(usize, TaskSpec)> = datasets.iter().map(|d| (d.task_id, d.spec.clone())).collect();
    let ids: Vec<usize> = tasks.iter().map(|t| t.0).collect();
    let root = Rng::new(settings.seed).named("diag");
    let seed = root.named("contexts").next_u64();
    let contexts = match settings.source {
        ContextSource::OneShot => evalkit::one_shot_contexts(&run.policy, run.tae.latent_dim(), &tasks, settings.resamples, seed)?,
        ContextSource::Dataset => {
            let refs: Vec<&TaskDataset> = datasets.iter().collect();
            evalkit::dataset_contexts(&refs, settings.context_size, settings.resamples, seed)
        }
    };
    let diag = evalkit::rep_diagnostics(&run.tae, &contexts, &ids, KNN_K)?;
    let fresh = TaePair::new(run.config.tae_shape(), &mut root.named("random-init"));
    let baseline = evalkit::rep_diagnostics(&fresh, &contexts, &ids, KNN_K)?;
    Ok((
        DiagOutcome {
            knn_accuracy: diag.accuracy,
            random_init_knn_accuracy: baseline.accuracy,
            degenerate: diag.degenerate,
        },
        diag,
    ))
}

/// Representation diagnostics of a trained run; writes metrics and reps.
pub fn diag(run_dir: &Path, data_dir: &Path, settings: &DiagSettings, out: &Path) -> Result<DiagOutcome> {
    let started = Instant::now();
    let run = load_run(run_dir)?;
    let data = load_collection(data_dir)?;
    let (outcome, rep) = diagnose_run(&run, &data, settings)?;
    create_dir(out)?;
    let epoch = run.config.epochs.saturating_sub(1);
    let step = run.config.total_steps();
    let split = settings.split.name();
    let rows = vec![
        MetricRow::new(epoch, step, split, "rep_knn", outcome.knn_accuracy),
        MetricRow::new(epoch, step, split, "rep_knn_random_init", outcome.random_init_knn_accuracy),
        MetricRow::new(epoch, step, split, "rep_pca_degenerate", f64::from(u8::from(outcome.degenerate))),
    ];
    evalkit::export_metrics(&rows, &out.join(METRICS_FILE))?;
    let reps: Vec<RepRow> = rep
        .latents
        .iter()
        .zip(&rep.labels)
        .zip(&rep.projection)
        .map(|((z, &task_id), &proj)| RepRow {
            task_id,
            split: split.to_string(),
            z: z.0.clone(),
            proj,
        })
        .collect();
    evalkit::export_reps(&reps, run.tae.latent_dim(), &out.join(REPS_FILE))?;
    let mut manifest = RunManifest::new("diag", settings, settings.seed);
    manifest.artifacts = vec![METRICS_FILE.into(), REPS_FILE.into()];
    manifest.write(out, started)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Ratio,
    TaskCount,
    Diversity,
    Variant,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::Ratio => "ratio",
            Sweep::TaskCount => "task-count",
            Sweep::Diversity => "diversity",
            Sweep::Variant => "variant",
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sweep {
    type Err = GentleError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "ratio" => Ok(Sweep::Ratio),
            "task-count" => Ok(Sweep::TaskCount),
            "diversity" => Ok(Sweep::Diversity),
            "variant" => Ok(Sweep::Variant),
            other => Err(GentleError::config(format!("unknown sweep `{other}`"))),
        }
    }
}

/// Ego:donor sampling ratios of the ratio sweep.
pub const RATIO_SWEEP: [(usize, usize); 7] = [(1, 0), (1, 1), (1, 3), (1, 6), (1, 9), (1, 12), (1, 15)];
/// Training-task counts of the task-count sweep.
pub const TASK_COUNT_SWEEP: [usize; 4] = [4, 6, 8, 10];
/// Context-data qualities of the diversity sweep; the policy always learns from expert data.
pub const DIVERSITY_SWEEP: [Quality; 3] = [Quality::Expert, Quality::Medium, Quality::Mixed];

/// One configuration of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub config: TrainConfig,
    pub context_quality: Quality,
}

pub fn sweep_points(sweep: Sweep, base: &TrainConfig) -> Result<Vec<SweepPoint>> {
    let point = |label: String, config: TrainConfig, q: Quality| SweepPoint {
        label,
        config,
        context_quality: q,
    };
    let points = match sweep {
        Sweep::Ratio => RATIO_SWEEP
            .iter()
            .map(|&(ego, donor)| {
                let aug = AugmentConfig::from_ratio(base.k1 + base.k2, ego, donor)?;
                let cfg = TrainConfig {
                    k1: aug.k1,
                    k2: aug.k2,
                    ..base.clone()
                };
                Ok(point(format!("ratio_{ego}-{donor}"), cfg, Quality::Expert))
            })
            .collect::<Result<Vec<_>>>()?,
        Sweep::TaskCount => TASK_COUNT_SWEEP
            .iter()
            .map(|&n| {
                let cfg = TrainConfig {
                    n_train_tasks: n,
                    eval_probe_tasks: base.eval_probe_tasks.min(n),
                    ..base.clone()
                };
                point(format!("tasks_{n}"), cfg, Quality::Expert)
            })
            .collect(),
        Sweep::Diversity => DIVERSITY_SWEEP
            .iter()
            .map(|&q| point(format!("context_{}", q.name()), base.clone(), q))
            .collect(),
        Sweep::Variant => Variant::ALL
            .iter()
            .map(|&v| {
                let cfg = TrainConfig {
                    variant: v,
                    oracle_model: base.oracle_model && v.relabels(),
                    ..base.clone()
                };
                point(v.name().to_string(), cfg, Quality::Expert)
            })
            .collect(),
    };
    for p in &points {
        p.config.validate()?;
    }
    Ok(points)
}

/// Seed of replicate `r`; shared by every point of a sweep so points differ
/// only in the swept setting.
pub fn replicate_seed(root: u64, r: usize) -> u64 {
    Rng::new(root).named("ablate").stream(r as u64).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateSettings {
    pub sweep: Sweep,
    pub base: TrainConfig,
    pub replicates: usize,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub point: String,
    pub replicate: usize,
    pub seed: u64,
    pub protocol: Protocol,
    pub mean: f64,
    pub std: f64,
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "sweep,point,replicate,seed,protocol,split,mean,std";

/// Runs a sweep over `data_root/<family>/<quality>` datasets: train, then
/// evaluate on the test split under both protocols, per point and replicate.
/// Without `models`, ensembles are fitted in-process on each context dataset.
pub fn ablate(settings: &AblateSettings, data_root: &Path, models: Option<&Path>, out: &Path) -> Result<Vec<AblateRow>> {
    let started = Instant::now();
    if settings.replicates == 0 {
        return Err(GentleError::config("at least one replicate is required"));
    }
    let family = settings.base.family;
    let points = sweep_points(settings.sweep, &settings.base)?;
    let expert_dir = DatasetCollection::dir_in(data_root, family, Quality::Expert);
    require_dataset(&expert_dir)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    let mut fitted: Vec<(Quality, PathBuf)> = Vec::new();
    for p in &points {
        let ctx_dir = DatasetCollection::dir_in(data_root, family, p.context_quality);
        require_dataset(&ctx_dir)?;
        let needs_models = p.config.variant.relabels() && !p.config.oracle_model;
        let model_path = match (models, needs_models) {
            (_, false) => None,
            (Some(dir), true) if p.context_quality == Quality::Expert => Some(dir.to_path_buf()),
            _ => {
                if let Some((_, dir)) = fitted.iter().find(|(q, _)| *q == p.context_quality) {
                    Some(dir.clone())
                } else {
                    let dir = out.join("models").join(p.context_quality.name());
                    let cfg = PretrainConfig {
                        model: ModelTrainConfig::for_family(family),
                        seed: settings.seed,
                    };
                    pretrain(&ctx_dir, &cfg, &dir)?;
                    fitted.push((p.context_quality, dir.clone()));
                    Some(dir)
                }
            }
        };
        for r in 0..settings.replicates {
            let seed = replicate_seed(settings.seed, r);
            let cfg = TrainConfig { seed, ..p.config.clone() };
            let run_dir = out.join(&p.label).join(format!("seed_{r}"));
            let paths = TrainPaths {
                data: expert_dir.clone(),
                context_data: (p.context_quality != Quality::Expert).then(|| ctx_dir.clone()),
                models: model_path.clone(),
            };
            eprintln!("ablate {}: {} replicate {r}", settings.sweep, p.label);
            train(&cfg, &paths, &run_dir)?;
            let eval_settings = EvalSettings {
                protocols: vec![Protocol::GivenContext, Protocol::OneShot],
                split: Split::Test,
                episodes: settings.episodes,
                context_size: evalkit::DEFAULT_CONTEXT_SIZE,
                seed,
            };
            let outcome = eval(&run_dir, &expert_dir, &eval_settings, &run_dir.join("eval"))?;
            for rep in &outcome.reports {
                rows.push(AblateRow {
                    point: p.label.clone(),
                    replicate: r,
                    seed,
                    protocol: rep.protocol,
                    mean: rep.mean,
                    std: rep.std,
                });
            }
        }
    }
    let mut text = format!("{SUMMARY_HEADER}\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},test,{},{}\n",
            settings.sweep.name(),
            r.point,
            r.replicate,
            r.seed,
            r.protocol.name(),
            r.mean,
            r.std
        ));
    }
    write_text(&out.join(SUMMARY_FILE), &text)?;
    let mut manifest = RunManifest::new("ablate", settings, settings.seed);
    manifest.artifacts = files_below(out)?;
    manifest.write(out, started)?;
    Ok(rows)
}

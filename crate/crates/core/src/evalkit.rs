//! Evaluation protocols, representation diagnostics and CSV exports.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{episode_return, expert_action, random_action, rollout, Split, TaskDataset, Transition};
use crate::envsuite::{initial_state, TaskSpec};
use crate::error::{GentleError, Result};
use crate::numkit::{Matrix, Rng};
use crate::relabel::Policy;
use crate::tae::{ContextBatch, Latent, TaePair};

pub const DEFAULT_EPISODES: usize = 10;
pub const DEFAULT_CONTEXT_SIZE: usize = 256;
pub const KNN_K: usize = 5;

/// Total variance below which the latent cloud counts as a single point.
const DEGENERATE_VARIANCE: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    GivenContext,
    OneShot,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::GivenContext => "given_context",
            Protocol::OneShot => "one_shot",
        }
    }
}

impl FromStr for Protocol {
    type Err = GentleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "given" | "given_context" | "given-context" => Ok(Protocol::GivenContext),
            "oneshot" | "one_shot" | "one-shot" => Ok(Protocol::OneShot),
            other => Err(GentleError::config(format!("unknown protocol `{other}`"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Latent the evaluation episodes were conditioned on.
    pub latent: Latent,
    /// Return of the zero-prior exploration episode (one-shot only).
    pub adaptation_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub split: Split,
    pub tasks: Vec<TaskEval>,
    /// Mean over tasks of per-task mean returns.
    pub mean: f64,
    /// Standard deviation over tasks of per-task mean returns.
    pub std: f64,
}

impl EvalReport {
    pub fn from_tasks(protocol: Protocol, split: Split, tasks: Vec<TaskEval>) -> Self {
        let means: Vec<f64> = tasks.iter().map(|t| t.mean).collect();
        let (mean, std) = mean_std(&means);
        EvalReport {
            protocol,
            split,
            tasks,
            mean,
            std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub context_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: DEFAULT_EPISODES,
            context_size: DEFAULT_CONTEXT_SIZE,
        }
    }
}

fn act_one(policy: &dyn Policy, s: &[f64], z: &Latent) -> Vec<f64> {
    let states = Matrix::from_vec(1, s.len(), s.to_vec()).expect("one row");
    policy.act_batch(&states, z).row(0).to_vec()
}

/// One full-horizon episode with the policy conditioned on `z`.
pub fn run_episode(policy: &dyn Policy, spec: &TaskSpec, z: &Latent, rng: &mut Rng) -> Result<Vec<Transition>> {
    let family = spec.family();
    let start = initial_state(family, rng);
    rollout(spec, start, family.config().horizon, 0, |s| act_one(policy, s, z))
}

fn run_episodes(policy: &dyn Policy, spec: &TaskSpec, z: &Latent, episodes: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(GentleError::config("episode count must be at least 1"));
    }
    (0..episodes)
        .map(|_| run_episode(policy, spec, z, rng).map(|t| episode_return(&t)))
        .collect()
}

/// Samples `n` transitions uniformly with replacement.
pub fn sample_context(dataset: &TaskDataset, n: usize, rng: &mut Rng) -> ContextBatch {
    let picks = (0..n).map(|_| &dataset.transitions[rng.below(dataset.len())]);
    ContextBatch::from_transitions(dataset.family(), picks)
}

/// Encodes a context drawn from an expert pool, then evaluates.
pub fn eval_given_context(
    policy: &dyn Policy,
    tae: &TaePair,
    spec: &TaskSpec,
    task_id: usize,
    expert_pool: &TaskDataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<TaskEval> {
    if expert_pool.is_empty() {
        return Err(GentleError::config(format!("expert pool for task {task_id} is empty")));
    }
    if expert_pool.len() < cfg.context_size {
        eprintln!(
            "warning: task {task_id} expert pool has {} transitions, fewer than the context size {}; sampling with replacement",
            expert_pool.len(),
            cfg.context_size
        );
    }
    let rng = Rng::new(seed);
    let ctx = sample_context(expert_pool, cfg.context_size, &mut rng.named("context"));
    let z = tae.encode(&ctx)?;
    let returns = run_episodes(policy, spec, &z, cfg.episodes, &mut rng.named("episodes"))?;
    let (mean, std) = mean_std(&returns);
    Ok(TaskEval {
        task_id,
        returns,
        mean,
        std,
        latent: z,
        adaptation_return: None,
    })
}

/// Explores once with the zero prior, encodes that trajectory, then evaluates.
pub fn eval_one_shot(
    policy: &dyn Policy,
    tae: &TaePair,
    spec: &TaskSpec,
    task_id: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<TaskEval> {
    let rng = Rng::new(seed);
    let prior = Latent::prior(tae.latent_dim());
    let probe = run_episode(policy, spec, &prior, &mut rng.named("adapt"))?;
    let z = tae.encode(&ContextBatch::from_transitions(spec.family(), &probe))?;
    let returns = run_episodes(policy, spec, &z, cfg.episodes, &mut rng.named("episodes"))?;
    let (mean, std) = mean_std(&returns);
    Ok(TaskEval {
        task_id,
        returns,
        mean,
        std,
        latent: z,
        adaptation_return: Some(episode_return(&probe)),
    })
}

/// Runs a protocol over a task set. `pools` is required for given-context
/// and must align with `tasks`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    protocol: Protocol,
    split: Split,
    policy: &dyn Policy,
    tae: &TaePair,
    tasks: &[(usize, TaskSpec)],
    pools: Option<&[TaskDataset]>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(GentleError::config("evaluation needs at least one task"));
    }
    let root = Rng::new(seed);
    let rows: Result<Vec<TaskEval>> = tasks
        .par_iter()
        .enumerate()
        .map(|(k, (id, spec))| {
            let task_seed = root.stream(*id as u64).next_u64();
            match protocol {
                Protocol::OneShot => eval_one_shot(policy, tae, spec, *id, cfg, task_seed),
                Protocol::GivenContext => {
                    let pools = pools.ok_or_else(|| GentleError::config("given-context evaluation needs expert pools"))?;
                    let pool = pools.get(k).ok_or_else(|| GentleError::config("one expert pool per task required"))?;
                    eval_given_context(policy, tae, spec, *id, pool, cfg, task_seed)
                }
            }
        })
        .collect();
    Ok(EvalReport::from_tasks(protocol, split, rows?))
}

/// Policy that ignores `z` and acts like the scripted expert of one task.
pub struct ExpertPolicy<'a>(pub &'a TaskSpec);

impl Policy for ExpertPolicy<'_> {
    fn act_batch(&self, states: &Matrix, _z: &Latent) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..states.rows()).map(|r| expert_action(self.0, states.row(r))).collect();
        Matrix::from_rows(&rows).expect("expert actions share a width")
    }
}

/// Monte-Carlo mean returns of the scripted expert and of uniform random
/// actions; both see the same initial states.
pub fn reference_returns(spec: &TaskSpec, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let family = spec.family();
    let horizon = family.config().horizon;
    let mut starts = Rng::new(seed).named("starts");
    let mut noise = Rng::new(seed).named("random-actions");
    let (mut expert, mut random) = (0.0, 0.0);
    for _ in 0..episodes {
        let s0 = initial_state(family, &mut starts);
        expert += episode_return(&rollout(spec, s0.clone(), horizon, 0, |s| expert_action(spec, s))?);
        random += episode_return(&rollout(spec, s0, horizon, 0, |_| random_action(family, &mut noise))?);
    }
    Ok((expert / episodes as f64, random / episodes as f64))
}

/// Leave-one-out k-NN accuracy of predicting `labels` from `points`.
/// Neighbors at equal distance are taken in index order; equal vote counts
/// go to the lowest label.
pub fn knn_accuracy(points: &[&[f64]], labels: &[usize], k: usize) -> f64 {
    assert_eq!(points.len(), labels.len());
    assert!(points.len() >= 2, "k-NN needs at least two points");
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut correct = 0usize;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        order.clear();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let d: f64 = p.iter().zip(*q).map(|(a, b)| (a - b).powi(2)).sum();
                order.push((d, j));
            }
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; n_labels];
        for &(_, j) in order.iter().take(k) {
            votes[labels[j]] += 1;
        }
        let best = votes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map(|(l, _)| l);
        if best == Some(labels[i]) {
            correct += 1;
        }
    }
    correct as f64 / points.len() as f64
}

/// Projection onto the top two principal components. The second flag is set
/// when the cloud has no variance and the projection is all zeros.
pub fn pca_projection(points: &[&[f64]]) -> (Vec<[f64; 2]>, bool) {
    let n = points.len();
    let dim = points.first().map_or(0, |p| p.len());
    if n == 0 || dim == 0 {
        return (vec![[0.0; 2]; n], true);
    }
    let mut centered = DMatrix::<f64>::zeros(n, dim);
    for j in 0..dim {
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
        for (i, p) in points.iter().enumerate() {
            centered[(i, j)] = p[j] - mean;
        }
    }
    let cov = centered.transpose() * &centered / n as f64;
    if cov.trace() < DEGENERATE_VARIANCE {
        return (vec![[0.0; 2]; n], true);
    }
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |c: usize| -> Option<Vec<f64>> {
        let &col = idx.get(c)?;
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        // fix the sign so the largest-magnitude entry is positive
        let lead = v.iter().copied().fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Some(v)
    };
    let axes = [axis(0), axis(1)];
    let proj = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let mut out = [0.0; 2];
            for (c, ax) in axes.iter().enumerate() {
                if let Some(ax) = ax {
                    out[c] = row.iter().zip(ax).map(|(a, b)| a * b).sum();
                }
            }
            out
        })
        .collect();
    (proj, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepDiagnostics {
    pub accuracy: f64,
    pub latents: Vec<Latent>,
    pub labels: Vec<usize>,
    pub projection: Vec<[f64; 2]>,
    pub degenerate: bool,
}

/// Encodes every context, scores k-NN task identification and projects.
/// `contexts[t]` holds the resampled contexts of the task labeled `task_ids[t]`.
pub fn rep_diagnostics(tae: &TaePair, contexts: &[Vec<ContextBatch>], task_ids: &[usize], k: usize) -> Result<RepDiagnostics> {
    if contexts.len() < 2 || contexts.len() != task_ids.len() {
        return Err(GentleError::config("representation diagnostics need at least 2 labeled tasks"));
    }
    let flat: Vec<&ContextBatch> = contexts.iter().flatten().collect();
    let latents = tae.encode_many(&flat)?;
    let labels: Vec<usize> = contexts
        .iter()
        .enumerate()
        .flat_map(|(t, c)| std::iter::repeat_n(t, c.len()))
        .collect();
    let points: Vec<&[f64]> = latents.iter().map(|z| z.as_slice()).collect();
    let accuracy = knn_accuracy(&points, &labels, k);
    let (projection, degenerate) = pca_projection(&points);
    Ok(RepDiagnostics {
        accuracy,
        labels: labels.into_iter().map(|t| task_ids[t]).collect(),
        latents,
        projection,
        degenerate,
    })
}

/// `resamples` contexts of size `n` per dataset.
pub fn dataset_contexts(datasets: &[&TaskDataset], n: usize, resamples: usize, seed: u64) -> Vec<Vec<ContextBatch>> {
    let root = Rng::new(seed);
    datasets
        .iter()
        .map(|d| {
            let mut rng = root.stream(d.task_id as u64);
            (0..resamples).map(|_| sample_context(d, n, &mut rng)).collect()
        })
        .collect()
}

/// `resamples` zero-prior exploration trajectories per task, as contexts.
pub fn one_shot_contexts(
    policy: &dyn Policy,
    latent_dim: usize,
    tasks: &[(usize, TaskSpec)],
    resamples: usize,
    seed: u64,
) -> Result<Vec<Vec<ContextBatch>>> {
    let root = Rng::new(seed);
    let prior = Latent::prior(latent_dim);
    tasks
        .par_iter()
        .map(|(id, spec)| {
            let mut rng = root.stream(*id as u64);
            (0..resamples)
                .map(|_| {
                    let traj = run_episode(policy, spec, &prior, &mut rng)?;
                    Ok(ContextBatch::from_transitions(spec.family(), &traj))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(epoch: usize, step: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricRow {
            epoch,
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepRow {
    pub task_id: usize,
    pub split: String,
    pub z: Vec<f64>,
    pub proj: [f64; 2],
}

pub const METRICS_HEADER: &str = "epoch,step,split,metric,value";

/// Exclusive claim on an output file, released on drop.
struct WriteLock {
    path: PathBuf,
}

impl WriteLock {
    fn acquire(target: &Path) -> Result<Self> {
        let mut name = target.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WriteLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(GentleError::Locked(target.to_path_buf())),
            Err(e) => Err(GentleError::io(&path, e)),
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Writes `text` to a sibling temp file under a lock, then renames it into place.
fn write_locked(path: &Path, text: &str) -> Result<()> {
    let _lock = WriteLock::acquire(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    File::create(&tmp)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| GentleError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| GentleError::io(path, e))
}

fn check_field(path: &Path, field: &str) -> Result<()> {
    if field.contains([',', '\n', '"']) {
        return Err(GentleError::format(path, format!("field `{field}` contains a separator")));
    }
    Ok(())
}

pub fn export_metrics(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut text = format!("{METRICS_HEADER}\n");
    for r in rows {
        check_field(path, &r.split)?;
        check_field(path, &r.metric)?;
        text.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.step, r.split, r.metric, r.value));
    }
    write_locked(path, &text)
}

fn read_lines(path: &Path, header_prefix: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| GentleError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.starts_with(header_prefix) => Ok(lines.map(str::to_string).collect()),
        _ => Err(GentleError::format(path, "missing or unexpected header")),
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    read_lines(path, METRICS_HEADER)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let bad = || GentleError::format(path, format!("malformed metrics row {}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(MetricRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                step: f[1].parse().map_err(|_| bad())?,
                split: f[2].to_string(),
                metric: f[3].to_string(),
                value: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn reps_header(latent_dim: usize) -> String {
    let mut h = String::from("task_id,split");
    for j in 1..=latent_dim {
        h.push_str(&format!(",z{j}"));
    }
    h.push_str(",proj_x,proj_y");
    h
}

pub fn export_reps(rows: &[RepRow], latent_dim: usize, path: &Path) -> Result<()> {
    let mut text = reps_header(latent_dim);
    text.push('\n');
    for r in rows {
        check_field(path, &r.split)?;
        if r.z.len() != latent_dim {
            return Err(GentleError::Dimension {
                context: "reps row latent",
                expected: latent_dim,
                got: r.z.len(),
            });
        }
        text.push_str(&format!("{},{}", r.task_id, r.split));
        for v in r.z.iter().chain(&r.proj) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    write_locked(path, &text)
}

pub fn read_reps(path: &Path) -> Result<Vec<RepRow>> {
    let lines = read_lines(path, "task_id,split")?;
    lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let bad = || GentleError::format(path, format!("malformed reps row {}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 4 {
                return Err(bad());
            }
            let nums: Vec<f64> = f[2..].iter().map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            let m = nums.len() - 2;
            Ok(RepRow {
                task_id: f[0].parse().map_err(|_| bad())?,
                split: f[1].to_string(),
                z: nums[..m].to_vec(),
                proj: [nums[m], nums[m + 1]],
            })
        })
        .collect()
}

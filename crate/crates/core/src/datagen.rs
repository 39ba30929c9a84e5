//! Scripted behavior policies and offline dataset collection.
//!
//! On disk a dataset collection is one directory per (family, quality):
//! `manifest.json` plus one CSV per task with columns
//! `traj, step, s.., a.., s_next.., r`. Reals are written with 17
//! significant digits so a save/load round trip is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envsuite::{self, clip_action, env_step, Family, TaskSpec, BASE_RETENTION, TARGET_SPEED};
use crate::error::{GentleError, Result};
use crate::numkit::Rng;

pub const SCHEMA_VERSION: u32 = 1;
/// Default trajectories per task.
pub const DEFAULT_TRAJECTORIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub r: f64,
    pub traj: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Expert,
    Medium,
    Mixed,
}

impl Quality {
    pub fn name(self) -> &'static str {
        match self {
            Quality::Expert => "expert",
            Quality::Medium => "medium",
            Quality::Mixed => "mixed",
        }
    }

    /// Gaussian action-noise scale for one trajectory.
    pub fn trajectory_sigma(self, action_bound: f64, rng: &mut Rng) -> f64 {
        match self {
            Quality::Expert => 0.0,
            Quality::Medium => action_bound,
            Quality::Mixed => {
                const TIERS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
                TIERS[rng.below(TIERS.len())] * action_bound
            }
        }
    }
}

impl FromStr for Quality {
    type Err = GentleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Quality::Expert),
            "medium" => Ok(Quality::Medium),
            "mixed" => Ok(Quality::Mixed),
            other => Err(GentleError::config(format!("unknown data quality `{other}`"))),
        }
    }
}

/// Noise-free scripted expert.
///
/// PointRobot heads straight for the goal at full speed; PointMassParams
/// applies the force that lands exactly on the target velocity next step.
pub fn expert_action(spec: &TaskSpec, s: &[f64]) -> Vec<f64> {
    let cfg = spec.family().config();
    match *spec {
        TaskSpec::PointRobot { goal } => clip_action(&[goal[0] - s[0], goal[1] - s[1]], cfg.action_bound),
        TaskSpec::PointMassParams {
            damping_mult,
            mass_mult,
        } => {
            let retention = BASE_RETENTION.powf(damping_mult);
            let want = [TARGET_SPEED - retention * s[2], -retention * s[3]];
            clip_action(
                &[want[0] * mass_mult / cfg.dt, want[1] * mass_mult / cfg.dt],
                cfg.action_bound,
            )
        }
    }
}

/// Expert action plus Gaussian noise of scale `sigma`, clipped to the bound.
pub fn scripted_policy(spec: &TaskSpec, s: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let bound = spec.family().config().action_bound;
    let mut a = expert_action(spec, s);
    if sigma > 0.0 {
        for v in &mut a {
            *v += sigma * rng.normal();
        }
    }
    clip_action(&a, bound)
}

pub fn random_action(family: Family, rng: &mut Rng) -> Vec<f64> {
    let bound = family.config().action_bound;
    (0..family.action_dim())
        .map(|_| rng.uniform_range(-bound, bound))
        .collect()
}

/// Rolls out one episode of `horizon` steps from `start`.
pub fn rollout<P>(spec: &TaskSpec, start: Vec<f64>, horizon: usize, traj: usize, mut policy: P) -> Result<Vec<Transition>>
where
    P: FnMut(&[f64]) -> Vec<f64>,
{
    let mut s = start;
    let mut out = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let a = policy(&s);
        let (s_next, r) = env_step(spec, &s, &a)?;
        out.push(Transition {
            s: std::mem::replace(&mut s, s_next.clone()),
            a: clip_action(&a, spec.family().config().action_bound),
            s_next,
            r,
            traj,
            step,
        });
    }
    Ok(out)
}

pub fn episode_return(transitions: &[Transition]) -> f64 {
    transitions.iter().map(|t| t.r).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    /// Metadata only; never shown to the encoder.
    pub spec: TaskSpec,
    pub quality: Quality,
    pub horizon: usize,
    pub transitions: Vec<Transition>,
}

impl TaskDataset {
    pub fn family(&self) -> Family {
        self.spec.family()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn num_trajectories(&self) -> usize {
        self.transitions.len() / self.horizon.max(1)
    }

    /// Checks trajectory grouping and `s_{t+1} == s'_t` inside each trajectory.
    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        if self.horizon == 0 || !self.transitions.len().is_multiple_of(self.horizon) {
            return Err(format!(
                "{} transitions do not form complete trajectories of {}",
                self.transitions.len(),
                self.horizon
            ));
        }
        for (i, chunk) in self.transitions.chunks(self.horizon).enumerate() {
            for (t, tr) in chunk.iter().enumerate() {
                if tr.step != t || tr.traj != chunk[0].traj {
                    return Err(format!("trajectory {i}: bad (traj, step) at row {t}"));
                }
                if !tr.r.is_finite() {
                    return Err(format!("trajectory {i}: non-finite reward"));
                }
            }
            for w in chunk.windows(2) {
                if w[0].s_next != w[1].s {
                    return Err(format!("trajectory {i}: s_(t+1) != s'_t at step {}", w[1].step));
                }
            }
        }
        Ok(())
    }
}

/// Collects `n_traj` trajectories of `horizon` steps with the scripted policy.
pub fn collect_dataset(
    spec: &TaskSpec,
    task_id: usize,
    quality: Quality,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<TaskDataset> {
    if n_traj == 0 || horizon == 0 {
        return Err(GentleError::config("n_traj and horizon must be at least 1"));
    }
    let family = spec.family();
    let bound = family.config().action_bound;
    let root = Rng::new(seed).stream(task_id as u64);
    let mut transitions = Vec::with_capacity(n_traj * horizon);
    for traj in 0..n_traj {
        let mut rng = root.stream(traj as u64);
        let sigma = quality.trajectory_sigma(bound, &mut rng);
        let start = envsuite::initial_state(family, &mut rng);
        transitions.extend(rollout(spec, start, horizon, traj, |s| {
            scripted_policy(spec, s, sigma, &mut rng)
        })?);
    }
    Ok(TaskDataset {
        task_id,
        spec: spec.clone(),
        quality,
        horizon,
        transitions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = GentleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(GentleError::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task_id: usize,
    pub split: Split,
    pub file: String,
    pub spec: TaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub family: Family,
    pub quality: Quality,
    pub seed: u64,
    pub n_traj: usize,
    pub horizon: usize,
    pub tasks: Vec<ManifestEntry>,
}

/// Train and test datasets of one family and quality.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCollection {
    pub manifest: DatasetManifest,
    pub train: Vec<TaskDataset>,
    pub test: Vec<TaskDataset>,
}

impl DatasetCollection {
    /// Samples train/test tasks and collects every dataset.
    pub fn generate(
        family: Family,
        quality: Quality,
        n_train: usize,
        n_test: usize,
        n_traj: usize,
        seed: u64,
    ) -> Result<Self> {
        let (train_specs, test_specs) = envsuite::sample_split(family, n_train, n_test, seed)?;
        Self::collect(family, quality, &train_specs, &test_specs, n_traj, seed)
    }

    /// Collects datasets for given tasks (used to pair qualities over one task set).
    pub fn collect(
        family: Family,
        quality: Quality,
        train_specs: &[TaskSpec],
        test_specs: &[TaskSpec],
        n_traj: usize,
        seed: u64,
    ) -> Result<Self> {
        let horizon = family.config().horizon;
        let data_seed = Rng::new(seed).named("data").named(quality.name()).next_u64();
        let mut tasks = Vec::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (split, specs) in [(Split::Train, train_specs), (Split::Test, test_specs)] {
            for spec in specs {
                let task_id = tasks.len();
                let ds = collect_dataset(spec, task_id, quality, n_traj, horizon, data_seed)?;
                tasks.push(ManifestEntry {
                    task_id,
                    split,
                    file: format!("task_{task_id:03}.csv"),
                    spec: spec.clone(),
                });
                match split {
                    Split::Train => train.push(ds),
                    Split::Test => test.push(ds),
                }
            }
        }
        Ok(DatasetCollection {
            manifest: DatasetManifest {
                schema_version: SCHEMA_VERSION,
                family,
                quality,
                seed,
                n_traj,
                horizon,
                tasks,
            },
            train,
            test,
        })
    }

    pub fn family(&self) -> Family {
        self.manifest.family
    }

    /// `<root>/<family>/<quality>`.
    pub fn dir_in(root: &Path, family: Family, quality: Quality) -> PathBuf {
        root.join(family.name()).join(quality.name())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GentleError::io(dir, e))?;
        for (entry, ds) in self.manifest.tasks.iter().zip(self.train.iter().chain(&self.test)) {
            save_dataset(ds, &dir.join(&entry.file))?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| GentleError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let rows = manifest.n_traj * manifest.horizon;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for entry in &manifest.tasks {
            let ds = load_dataset(
                &dir.join(&entry.file),
                entry.task_id,
                &entry.spec,
                manifest.quality,
                manifest.horizon,
                Some(rows),
            )?;
            match entry.split {
                Split::Train => train.push(ds),
                Split::Test => test.push(ds),
            }
        }
        Ok(DatasetCollection { manifest, train, test })
    }
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| GentleError::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| GentleError::format(&path, e.to_string()))?;
    let version = raw
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| GentleError::format(&path, "missing schema_version"))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(GentleError::SchemaVersion {
            expected: SCHEMA_VERSION,
            found: version as u32,
        });
    }
    serde_json::from_value(raw).map_err(|e| GentleError::format(&path, e.to_string()))
}

fn csv_header(family: Family) -> String {
    let sd = family.state_dim();
    let mut cols = vec!["traj".to_string(), "step".to_string()];
    cols.extend((0..sd).map(|i| format!("s{i}")));
    cols.extend((0..family.action_dim()).map(|i| format!("a{i}")));
    cols.extend((0..sd).map(|i| format!("s_next{i}")));
    cols.push("r".into());
    cols.join(",")
}

pub fn save_dataset(ds: &TaskDataset, path: &Path) -> Result<()> {
    let mut out = csv_header(ds.family());
    out.push('\n');
    for t in &ds.transitions {
        write!(out, "{},{}", t.traj, t.step).unwrap();
        for v in t.s.iter().chain(&t.a).chain(&t.s_next).chain(std::iter::once(&t.r)) {
            write!(out, ",{v:.16e}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| GentleError::io(path, e))
}

pub fn load_dataset(
    path: &Path,
    task_id: usize,
    spec: &TaskSpec,
    quality: Quality,
    horizon: usize,
    expected_rows: Option<usize>,
) -> Result<TaskDataset> {
    let family = spec.family();
    let text = fs::read_to_string(path).map_err(|e| GentleError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != csv_header(family) {
        return Err(GentleError::format(path, "unexpected CSV header"));
    }
    let (sd, ad) = (family.state_dim(), family.action_dim());
    let width = 2 + 2 * sd + ad + 1;
    let mut transitions = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(GentleError::format(path, format!("row {} has {} fields, want {width}", i + 1, fields.len())));
        }
        let bad = |what: &str| GentleError::format(path, format!("row {}: bad {what}", i + 1));
        let traj = fields[0].parse().map_err(|_| bad("traj"))?;
        let step = fields[1].parse().map_err(|_| bad("step"))?;
        let vals: Vec<f64> = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("number"))?;
        transitions.push(Transition {
            s: vals[..sd].to_vec(),
            a: vals[sd..sd + ad].to_vec(),
            s_next: vals[sd + ad..2 * sd + ad].to_vec(),
            r: vals[2 * sd + ad],
            traj,
            step,
        });
    }
    if let Some(expected) = expected_rows {
        if transitions.len() != expected {
            return Err(GentleError::RowCount {
                path: path.to_path_buf(),
                expected,
                found: transitions.len(),
            });
        }
    }
    let ds = TaskDataset {
        task_id,
        spec: spec.clone(),
        quality,
        horizon,
        transitions,
    };
    ds.check_consistency().map_err(|msg| GentleError::format(path, msg))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsuite::sample_tasks;

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn expert_at_goal_is_still() {
        let spec = TaskSpec::PointRobot { goal: [0.2, 0.7] };
        assert_eq!(expert_action(&spec, &[0.2, 0.7]), vec![0.0, 0.0]);
    }

    #[test]
    fn expert_moves_at_full_speed_toward_goal() {
        let spec = TaskSpec::PointRobot { goal: [1.0, 0.0] };
        assert_eq!(expert_action(&spec, &[0.0, 0.0]), vec![0.1, 0.0]);
    }

    #[test]
    fn quality_ordering_by_monte_carlo() {
        for family in Family::ALL {
            let tasks = sample_tasks(family, 100, 21).unwrap();
            let horizon = family.config().horizon;
            let bound = family.config().action_bound;
            let mut rng = Rng::new(5);
            let mut returns = [Vec::new(), Vec::new(), Vec::new()];
            for spec in &tasks {
                for (k, sigma) in [Some(0.0), Some(bound), None].into_iter().enumerate() {
                    let start = envsuite::initial_state(family, &mut rng);
                    let ep = rollout(spec, start, horizon, 0, |s| match sigma {
                        Some(sig) => scripted_policy(spec, s, sig, &mut rng),
                        None => random_action(family, &mut rng),
                    })
                    .unwrap();
                    returns[k].push(episode_return(&ep));
                }
            }
            let (e, e_se) = mean_and_se(&returns[0]);
            let (m, m_se) = mean_and_se(&returns[1]);
            let (r, r_se) = mean_and_se(&returns[2]);
            assert!(e - m > 3.0 * (e_se + m_se), "{family}: expert {e} medium {m}");
            assert!(m - r > 3.0 * (m_se + r_se), "{family}: medium {m} random {r}");
        }
    }

    #[test]
    fn expert_is_near_optimal_on_point_robot() {
        // Best possible: straight line at full speed, 0.1 per step.
        let tasks = sample_tasks(Family::PointRobot, 100, 2).unwrap();
        let mut rng = Rng::new(0);
        let (mut expert_total, mut best_total) = (0.0, 0.0);
        for spec in &tasks {
            let TaskSpec::PointRobot { goal } = *spec else { unreachable!() };
            let start = envsuite::initial_state(Family::PointRobot, &mut rng);
            let d0 = ((goal[0] - start[0]).powi(2) + (goal[1] - start[1]).powi(2)).sqrt();
            best_total += (1..=20).map(|t| -(d0 - 0.1 * t as f64).max(0.0)).sum::<f64>();
            let ep = rollout(spec, start, 20, 0, |s| expert_action(spec, s)).unwrap();
            expert_total += episode_return(&ep);
        }
        // both are negative: expert must be within 5% of the best
        assert!(expert_total >= best_total / 0.95, "{expert_total} vs {best_total}");
    }

    #[test]
    fn return_is_monotone_in_noise() {
        let tasks = sample_tasks(Family::PointRobot, 100, 4).unwrap();
        let mut rng = Rng::new(8);
        let mut means = Vec::new();
        for sigma in [0.0, 0.05, 0.1, 0.2] {
            let mut total = 0.0;
            for spec in &tasks {
                let start = envsuite::initial_state(Family::PointRobot, &mut rng);
                let ep = rollout(spec, start, 20, 0, |s| scripted_policy(spec, s, sigma, &mut rng)).unwrap();
                total += episode_return(&ep);
            }
            means.push(total / tasks.len() as f64);
        }
        assert!(means.windows(2).all(|w| w[0] >= w[1]), "{means:?}");
    }

    #[test]
    fn collection_counts_and_replay() {
        let spec = sample_tasks(Family::PointRobot, 1, 0).unwrap().remove(0);
        let ds = collect_dataset(&spec, 0, Quality::Expert, 100, 20, 1).unwrap();
        assert_eq!(ds.len(), 2000);
        assert_eq!(ds.num_trajectories(), 100);
        ds.check_consistency().unwrap();
        for t in &ds.transitions {
            assert_eq!(env_step(&spec, &t.s, &t.a).unwrap(), (t.s_next.clone(), t.r));
        }
    }

    #[test]
    fn mixed_quality_is_consistent() {
        let spec = sample_tasks(Family::PointMassParams, 1, 0).unwrap().remove(0);
        let ds = collect_dataset(&spec, 3, Quality::Mixed, 10, 50, 1).unwrap();
        ds.check_consistency().unwrap();
        for t in &ds.transitions {
            assert_eq!(env_step(&spec, &t.s, &t.a).unwrap(), (t.s_next.clone(), t.r));
        }
    }

    #[test]
    fn save_load_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let coll = DatasetCollection::generate(Family::PointMassParams, Quality::Medium, 2, 1, 3, 7).unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        coll.save(&a).unwrap();
        DatasetCollection::generate(Family::PointMassParams, Quality::Medium, 2, 1, 3, 7)
            .unwrap()
            .save(&b)
            .unwrap();
        for f in ["manifest.json", "task_000.csv", "task_002.csv"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
        let back = DatasetCollection::load(&a).unwrap();
        assert_eq!(back, coll);
    }

    #[test]
    fn truncated_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let coll = DatasetCollection::generate(Family::PointRobot, Quality::Expert, 1, 0, 2, 1).unwrap();
        coll.save(dir.path()).unwrap();
        let path = dir.path().join("task_000.csv");
        let text = fs::read_to_string(&path).unwrap();
        let keep: Vec<&str> = text.lines().take(30).collect();
        fs::write(&path, keep.join("\n")).unwrap();
        let err = DatasetCollection::load(dir.path()).unwrap_err();
        assert!(matches!(err, GentleError::RowCount { expected: 40, found: 29, .. }));
        assert!(err.to_string().contains("task_000.csv"));
    }

    #[test]
    fn unknown_schema_version_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let coll = DatasetCollection::generate(Family::PointRobot, Quality::Expert, 1, 0, 1, 1).unwrap();
        coll.save(dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            DatasetCollection::load(dir.path()),
            Err(GentleError::SchemaVersion { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn missing_directory_is_missing_input() {
        let err = DatasetCollection::load(Path::new("/nonexistent/gentle")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}

//! Per-task ensemble regression models used to label relabeled probing data.
//!
//! Each member is an MLP regressing the normalized label from the normalized
//! input `(s, a)` by mean squared error. Labels are `(r)` for reward-only
//! families and `(s' - s, r)` otherwise; predictions are the ensemble mean.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{TaskDataset, Transition};
use crate::envsuite::{self, Family, TaskSpec};
use crate::error::{GentleError, Result};
use crate::numkit::{mse_loss, snapshot, Activation, Adam, Matrix, Mlp, Rng};

pub const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainConfig {
    pub members: usize,
    pub holdout_fraction: f64,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub hidden_width: usize,
    /// Number of linear layers.
    pub depth: usize,
}

impl ModelTrainConfig {
    /// Seven 3-layer members of width 64 for every family. PointMassParams
    /// uses the same size as PointRobot to keep pretraining at desk scale.
    pub fn for_family(_family: Family) -> Self {
        ModelTrainConfig {
            members: 7,
            holdout_fraction: 0.2,
            patience: 5,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            hidden_width: 64,
            depth: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(GentleError::config("holdout_fraction must be in (0, 1)"));
        }
        if self.patience == 0 || self.members == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(GentleError::config("patience, members, batch_size and max_epochs must be >= 1"));
        }
        if self.depth == 0 || self.hidden_width == 0 {
            return Err(GentleError::config("depth and hidden_width must be >= 1"));
        }
        Ok(())
    }
}

/// Per-dimension affine normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &Matrix) -> Self {
        let n = rows.rows().max(1) as f64;
        let d = rows.cols();
        let mut mean = vec![0.0; d];
        for r in 0..rows.rows() {
            for (m, v) in mean.iter_mut().zip(rows.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..rows.rows() {
            for ((acc, v), m) in var.iter_mut().zip(rows.row(r)).zip(&mean) {
                *acc += (v - m).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(MIN_STD)).collect();
        Normalizer { mean, std }
    }

    pub fn normalize(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        out
    }

    pub fn denormalize(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + mu;
            }
        }
        out
    }
}

/// Label encoding shared with the task auto-encoder.
pub fn encode_label(family: Family, s: &[f64], s_next: &[f64], r: f64) -> Vec<f64> {
    if family.config().reward_only {
        vec![r]
    } else {
        let mut y: Vec<f64> = s_next.iter().zip(s).map(|(n, c)| n - c).collect();
        y.push(r);
        y
    }
}

/// Inverse of [`encode_label`]; reward-only families take `s'` from the shared dynamics.
pub fn decode_label(family: Family, s: &[f64], a: &[f64], y: &[f64]) -> (Vec<f64>, f64) {
    if family.config().reward_only {
        let next = envsuite::shared_dynamics(family, s, a).expect("reward-only family has shared dynamics");
        (next, y[0])
    } else {
        let sd = family.state_dim();
        let next = s.iter().zip(&y[..sd]).map(|(c, d)| c + d).collect();
        (next, y[sd])
    }
}

pub fn input_matrix(transitions: &[&Transition]) -> Matrix {
    let rows: Vec<Vec<f64>> = transitions
        .iter()
        .map(|t| t.s.iter().chain(&t.a).copied().collect())
        .collect();
    Matrix::from_rows(&rows).expect("uniform transition widths")
}

pub fn label_matrix(family: Family, transitions: &[&Transition]) -> Matrix {
    let rows: Vec<Vec<f64>> = transitions
        .iter()
        .map(|t| encode_label(family, &t.s, &t.s_next, t.r))
        .collect();
    Matrix::from_rows(&rows).expect("uniform label widths")
}

/// Patience-based early stopping on a validation error.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Records one epoch's error. Returns `(improved, stop)`.
    pub fn observe(&mut self, err: f64) -> (bool, bool) {
        if err < self.best {
            self.best = err;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_holdout_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub task_id: usize,
    pub family: Family,
    pub members: Vec<Mlp>,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
    pub reports: Vec<MemberReport>,
    pub holdout_size: usize,
    pub train_size: usize,
}

/// Sizes of the train/holdout split for `n` rows.
pub fn split_sizes(n: usize, holdout_fraction: f64) -> (usize, usize) {
    let holdout = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    (n - holdout, holdout)
}

/// Fits one ensemble member on already-normalized data.
fn train_member(
    cfg: &ModelTrainConfig,
    dims: &[usize],
    x_train: &Matrix,
    y_train: &Matrix,
    x_hold: &Matrix,
    y_hold: &Matrix,
    mut rng: Rng,
) -> (Mlp, MemberReport) {
    let mut net = Mlp::new(dims, Activation::Relu, Activation::Identity, &mut rng);
    let mut opt = Adam::new(net.num_params(), cfg.learning_rate);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = net.clone();
    let mut report = MemberReport {
        epochs_run: 0,
        best_epoch: 0,
        best_holdout_mse: f64::INFINITY,
    };
    let n = x_train.rows();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = gather(x_train, chunk);
            let yb = gather(y_train, chunk);
            let (_, grads) = net.gradient(&xb, |out| mse_loss(out, &yb)).expect("shapes fixed at init");
            opt.step(net.params_mut(), &grads);
        }
        let hold = mse_loss(&net.forward_batch(x_hold).expect("shapes"), y_hold).0;
        report.epochs_run = epoch;
        let (improved, stop) = stopper.observe(hold);
        if improved {
            best = net.clone();
            report.best_epoch = epoch;
            report.best_holdout_mse = hold;
        }
        if stop {
            break;
        }
    }
    (best, report)
}

pub(crate) fn gather(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Trains the ensemble `M_i` for one task dataset.
pub fn train_task_model(dataset: &TaskDataset, cfg: &ModelTrainConfig, seed: u64) -> Result<EnsembleModel> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(GentleError::config("cannot train a model on an empty dataset"));
    }
    let family = dataset.family();
    let all: Vec<&Transition> = dataset.transitions.iter().collect();
    let (n_train, n_hold) = split_sizes(all.len(), cfg.holdout_fraction);
    if n_train < cfg.batch_size {
        return Err(GentleError::config(format!(
            "dataset for task {} has {n_train} training rows, fewer than one batch of {}",
            dataset.task_id, cfg.batch_size
        )));
    }
    let root = Rng::new(seed).stream(dataset.task_id as u64);
    let mut order: Vec<usize> = (0..all.len()).collect();
    root.named("split").shuffle(&mut order);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let pick = |idx: &[usize]| idx.iter().map(|&i| all[i]).collect::<Vec<_>>();
    let (train_rows, hold_rows) = (pick(train_idx), pick(hold_idx));

    let x_train_raw = input_matrix(&train_rows);
    let y_train_raw = label_matrix(family, &train_rows);
    let input_norm = Normalizer::fit(&x_train_raw);
    let output_norm = Normalizer::fit(&y_train_raw);
    let x_train = input_norm.normalize(&x_train_raw);
    let y_train = output_norm.normalize(&y_train_raw);
    let x_hold = input_norm.normalize(&input_matrix(&hold_rows));
    let y_hold = output_norm.normalize(&label_matrix(family, &hold_rows));

    let mut dims = vec![family.state_dim() + family.action_dim()];
    dims.extend(std::iter::repeat_n(cfg.hidden_width, cfg.depth - 1));
    dims.push(family.label_dim());

    let init = root.named("members");
    let trained: Vec<(Mlp, MemberReport)> = (0..cfg.members)
        .into_par_iter()
        .map(|k| train_member(cfg, &dims, &x_train, &y_train, &x_hold, &y_hold, init.stream(k as u64)))
        .collect();
    let (members, reports) = trained.into_iter().unzip();
    Ok(EnsembleModel {
        task_id: dataset.task_id,
        family,
        members,
        input_norm,
        output_norm,
        reports,
        holdout_size: n_hold,
        train_size: n_train,
    })
}

impl EnsembleModel {
    /// Ensemble-mean encoded labels for a batch of `(s, a)` rows.
    pub fn predict_labels(&self, x: &Matrix) -> Matrix {
        let xn = self.input_norm.normalize(x);
        let mut acc = Matrix::zeros(x.rows(), self.family.label_dim());
        for m in &self.members {
            let out = m.forward_batch(&xn).expect("model input width");
            for (a, o) in acc.data_mut().iter_mut().zip(out.data()) {
                *a += o;
            }
        }
        let k = self.members.len() as f64;
        acc.data_mut().iter_mut().for_each(|v| *v /= k);
        self.output_norm.denormalize(&acc)
    }

    /// `(s', r)` for one input.
    pub fn predict(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
        let x = Matrix::from_vec(1, s.len() + a.len(), s.iter().chain(a).copied().collect()).expect("row");
        let y = self.predict_labels(&x);
        decode_label(self.family, s, a, y.row(0))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GentleError::io(dir, e))?;
        for (k, m) in self.members.iter().enumerate() {
            snapshot::save_mlp(m, &dir.join(format!("member_{k}.gntl")))?;
        }
        let side = ModelSidecar {
            task_id: self.task_id,
            family: self.family,
            mode: if self.family.config().reward_only { "reward" } else { "dynamics_reward" }.into(),
            members: self.members.len(),
            input_norm: self.input_norm.clone(),
            output_norm: self.output_norm.clone(),
            reports: self.reports.clone(),
            holdout_size: self.holdout_size,
            train_size: self.train_size,
        };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string_pretty(&side).expect("sidecar"))
            .map_err(|e| GentleError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| GentleError::io(&path, e))?;
        let side: ModelSidecar =
            serde_json::from_str(&text).map_err(|e| GentleError::format(&path, e.to_string()))?;
        let members = (0..side.members)
            .map(|k| snapshot::load_mlp(&dir.join(format!("member_{k}.gntl"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleModel {
            task_id: side.task_id,
            family: side.family,
            members,
            input_norm: side.input_norm,
            output_norm: side.output_norm,
            reports: side.reports,
            holdout_size: side.holdout_size,
            train_size: side.train_size,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelSidecar {
    task_id: usize,
    family: Family,
    mode: String,
    members: usize,
    input_norm: Normalizer,
    output_norm: Normalizer,
    reports: Vec<MemberReport>,
    holdout_size: usize,
    train_size: usize,
}

/// Source of relabeled `(s', r)`: a learned ensemble or the true model.
#[derive(Debug, Clone)]
pub enum LabelModel {
    Learned(EnsembleModel),
    Oracle(TaskSpec),
}

impl LabelModel {
    pub fn family(&self) -> Family {
        match self {
            LabelModel::Learned(m) => m.family,
            LabelModel::Oracle(spec) => spec.family(),
        }
    }

    /// `(s', r)` for each `(s_k, a_k)`.
    pub fn predict_batch(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, f64)>> {
        match self {
            LabelModel::Learned(m) => {
                let rows: Vec<Vec<f64>> = states
                    .iter()
                    .zip(actions)
                    .map(|(s, a)| s.iter().chain(a).copied().collect())
                    .collect();
                let y = m.predict_labels(&Matrix::from_rows(&rows)?);
                Ok(states
                    .iter()
                    .zip(actions)
                    .enumerate()
                    .map(|(k, (s, a))| decode_label(m.family, s, a, y.row(k)))
                    .collect())
            }
            LabelModel::Oracle(spec) => states
                .iter()
                .zip(actions)
                .map(|(s, a)| envsuite::env_step(spec, s, a))
                .collect(),
        }
    }
}

/// Model directory for one task under a pretrain output root.
pub fn model_dir(root: &Path, task_id: usize) -> std::path::PathBuf {
    root.join(format!("task_{task_id:03}"))
}

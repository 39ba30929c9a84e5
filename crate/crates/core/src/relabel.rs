//! Probing-data construction by relabeling.
//!
//! For each task `i`, states are drawn from its own dataset (ego) and from
//! the pooled datasets of every other task (donors). Each state gets an
//! action from the current meta-policy conditioned on `z_i`, and the
//! outcome `(s', r)` comes from task `i`'s model. With `K1:K2 = 1:(N-1)` and
//! equal dataset sizes, every task's augmented states follow the same
//! mixture over source datasets.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::datagen::{TaskDataset, Transition};
use crate::dynmodel::LabelModel;
use crate::error::{GentleError, Result};
use crate::numkit::{Matrix, Rng};
use crate::tae::Latent;

/// Anything that maps a batch of states and a task latent to actions.
pub trait Policy: Sync {
    fn act_batch(&self, states: &Matrix, z: &Latent) -> Matrix;
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub k1: usize,
    pub k2: usize,
    /// Keep the stored action instead of querying the policy.
    pub no_policy_relabel: bool,
    /// Label with the true environment instead of the learned model.
    pub oracle_model: bool,
    /// Std of Gaussian noise added to relabeled policy actions, as a
    /// fraction of the action bound; 0 keeps the actor deterministic.
    pub action_noise: f64,
}

impl AugmentConfig {
    /// 64 ego states and 192 donor states.
    pub fn balanced() -> Self {
        AugmentConfig {
            k1: 64,
            k2: 192,
            no_policy_relabel: false,
            oracle_model: false,
            action_noise: 0.0,
        }
    }

    /// Splits `total` into `(k1, k2)` for an `ego:donor` ratio.
    pub fn from_ratio(total: usize, ego: usize, donor: usize) -> Result<Self> {
        if ego + donor == 0 {
            return Err(GentleError::config("sampling ratio must have a positive part"));
        }
        let k1 = (total * ego + (ego + donor) / 2) / (ego + donor);
        Ok(AugmentConfig {
            k1,
            k2: total - k1,
            ..Self::balanced()
        })
    }

    pub fn total(&self) -> usize {
        self.k1 + self.k2
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(GentleError::config("K1 + K2 must be at least 1"));
        }
        if !(self.action_noise >= 0.0 && self.action_noise.is_finite()) {
            return Err(GentleError::config("relabel action noise must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Ego,
    Donor,
}

impl SourceKind {
    fn name(self) -> &'static str {
        match self {
            SourceKind::Ego => "ego",
            SourceKind::Donor => "donor",
        }
    }
}

/// Where an augmented state was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub source_task: usize,
    pub source_index: usize,
    pub kind: SourceKind,
}

/// `D_i^aug`: relabeled transitions for one task, ego draws first.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentBuffer {
    pub task_index: usize,
    pub transitions: Vec<Transition>,
    pub provenance: Vec<Provenance>,
}

impl AugmentBuffer {
    pub fn empty(task_index: usize) -> Self {
        AugmentBuffer {
            task_index,
            transitions: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn ego_count(&self) -> usize {
        self.provenance.iter().filter(|p| p.kind == SourceKind::Ego).count()
    }

    /// Number of augmented states drawn from each source dataset.
    pub fn source_histogram(&self, n_tasks: usize) -> Vec<usize> {
        let mut counts = vec![0; n_tasks];
        for p in &self.provenance {
            counts[p.source_task] += 1;
        }
        counts
    }
}

/// Expected number of draws from each source dataset for task `task`.
pub fn expected_source_counts(sizes: &[usize], cfg: &AugmentConfig, task: usize) -> Vec<f64> {
    let donor_total: usize = sizes.iter().enumerate().filter(|&(j, _)| j != task).map(|(_, n)| n).sum();
    sizes
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            if j == task {
                cfg.k1 as f64
            } else if donor_total == 0 {
                0.0
            } else {
                cfg.k2 as f64 * n as f64 / donor_total as f64
            }
        })
        .collect()
}

/// Rebuilds every task's augmentation buffer from scratch.
///
/// `models[i]` labels task `i`; it is ignored under `oracle_model`, which
/// labels with the true dynamics of `datasets[i].spec`. `zs[i]` conditions
/// the policy for task `i`.
pub fn augment(
    datasets: &[TaskDataset],
    models: &[LabelModel],
    policy: &dyn Policy,
    zs: &[Latent],
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Vec<AugmentBuffer>> {
    cfg.validate()?;
    let n = datasets.len();
    if n == 0 {
        return Err(GentleError::config("augmentation needs at least one task"));
    }
    if cfg.k2 > 0 && n < 2 {
        return Err(GentleError::config("K2 > 0 needs a donor task, but only one task exists"));
    }
    if zs.len() != n {
        return Err(GentleError::Dimension {
            context: "task representations",
            expected: n,
            got: zs.len(),
        });
    }
    if !cfg.oracle_model && models.len() != n {
        return Err(GentleError::Dimension {
            context: "task models",
            expected: n,
            got: models.len(),
        });
    }
    if let Some(d) = datasets.iter().find(|d| d.is_empty()) {
        return Err(GentleError::config(format!("task {} has an empty dataset", d.task_id)));
    }
    let root = Rng::new(seed);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.stream(i as u64);
            let oracle;
            let model = if cfg.oracle_model {
                oracle = LabelModel::Oracle(datasets[i].spec.clone());
                &oracle
            } else {
                &models[i]
            };
            augment_task(datasets, i, model, policy, &zs[i], cfg, &mut rng)
        })
        .collect()
}

fn augment_task(
    datasets: &[TaskDataset],
    i: usize,
    model: &LabelModel,
    policy: &dyn Policy,
    z: &Latent,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<AugmentBuffer> {
    let donor_total: usize = datasets.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, d)| d.len()).sum();
    let mut provenance = Vec::with_capacity(cfg.total());
    for _ in 0..cfg.k1 {
        provenance.push(Provenance {
            source_task: i,
            source_index: rng.below(datasets[i].len()),
            kind: SourceKind::Ego,
        });
    }
    for _ in 0..cfg.k2 {
        let mut u = rng.below(donor_total);
        let mut j = 0;
        while j == i || u >= datasets[j].len() {
            if j != i {
                u -= datasets[j].len();
            }
            j += 1;
        }
        provenance.push(Provenance {
            source_task: j,
            source_index: u,
            kind: SourceKind::Donor,
        });
    }
    let sources: Vec<&Transition> = provenance
        .iter()
        .map(|p| &datasets[p.source_task].transitions[p.source_index])
        .collect();
    let states: Vec<Vec<f64>> = sources.iter().map(|t| t.s.clone()).collect();
    let actions: Vec<Vec<f64>> = if cfg.no_policy_relabel {
        sources.iter().map(|t| t.a.clone()).collect()
    } else {
        let s = Matrix::from_rows(&states)?;
        let a = policy.act_batch(&s, z);
        let bound = datasets[i].spec.family().config().action_bound;
        let sigma = cfg.action_noise * bound;
        (0..a.rows())
            .map(|k| {
                let row = a.row(k).iter();
                if sigma > 0.0 {
                    row.map(|&v| (v + sigma * rng.normal()).clamp(-bound, bound)).collect()
                } else {
                    row.copied().collect()
                }
            })
            .collect()
    };
    let labels = model.predict_batch(&states, &actions)?;
    let transitions = sources
        .iter()
        .zip(states)
        .zip(actions)
        .zip(labels)
        .map(|(((src, s), a), (s_next, r))| Transition {
            s,
            a,
            s_next,
            r,
            traj: src.traj,
            step: src.step,
        })
        .collect();
    Ok(AugmentBuffer {
        task_index: i,
        transitions,
        provenance,
    })
}

/// Writes buffers as CSV with provenance columns, for debugging.
pub fn dump_buffers(buffers: &[AugmentBuffer], path: &Path) -> Result<()> {
    let mut out = String::from("task,source_task,source_index,kind,s,a,s_next,r\n");
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.9e}")).collect::<Vec<_>>().join(" ");
    for b in buffers {
        for (t, p) in b.transitions.iter().zip(&b.provenance) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.9e}\n",
                b.task_index,
                p.source_task,
                p.source_index,
                p.kind.name(),
                join(&t.s),
                join(&t.a),
                join(&t.s_next),
                t.r
            ));
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| GentleError::io(path, e))
}

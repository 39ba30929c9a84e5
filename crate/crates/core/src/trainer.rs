//! Meta-training loop.
//!
//! Each epoch rebuilds the augmentation buffers, then runs `S` steps of:
//! sample one context batch per task from `D_i^aug ∪ D_i`, update the task
//! auto-encoder, re-encode the batches into detached latents, and update the
//! TD3+BC learner on per-task RL batches conditioned on those latents.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{Split, TaskDataset, Transition};
use crate::dynmodel::LabelModel;
use crate::envsuite::{Family, TaskSpec};
use crate::error::{GentleError, Result};
use crate::evalkit::{self, dataset_contexts, EvalConfig, MetricRow, Protocol, KNN_K};
use crate::numkit::snapshot::{load_mlp, save_mlp};
use crate::numkit::{Adam, Rng};
use crate::offpolicy::{ActorCritic, RlBatch, RlConfig};
use crate::relabel::{augment, AugmentBuffer, AugmentConfig};
use crate::tae::{ContextBatch, Latent, TaePair, TaeShape};

/// Total gradient steps in the published full-scale runs.
/// Behavior-cloning trade-off used by the desk preset.
pub const DESK_ALPHA: f64 = 0.1;

pub const PUBLISHED_TRAINING_STEPS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gentle,
    Contrastive,
    NoRelabel,
    NoPolicyRelabel,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Gentle, Variant::Contrastive, Variant::NoRelabel, Variant::NoPolicyRelabel];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gentle => "gentle",
            Variant::Contrastive => "contrastive",
            Variant::NoRelabel => "no_relabel",
            Variant::NoPolicyRelabel => "no_policy_relabel",
        }
    }

    pub fn relabels(self) -> bool {
        self != Variant::NoRelabel
    }
}

impl FromStr for Variant {
    type Err = GentleError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| GentleError::config(format!("unknown variant `{s}`")))
    }
}

/// Flat run configuration; every key is required in JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub family: Family,
    pub n_train_tasks: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub tae_batch: usize,
    pub rl_batch: usize,
    pub k1: usize,
    pub k2: usize,
    /// Gaussian exploration noise on relabeled actions, in action-bound units.
    pub relabel_noise: f64,
    pub latent_dim: usize,
    pub tae_lr: f64,
    pub rl_lr: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub tae_loss_weight: f64,
    pub variant: Variant,
    pub oracle_model: bool,
    pub seed: u64,
    pub tae_hidden_width: usize,
    pub tae_hidden_layers: usize,
    pub rl_hidden_width: usize,
    pub rl_hidden_layers: usize,
    pub tau: f64,
    pub policy_delay: u64,
    pub target_noise: f64,
    pub noise_clip: f64,
    /// Epoch period of the one-shot learning-curve evaluation.
    pub eval_every: usize,
    pub eval_probe_tasks: usize,
    pub eval_episodes: usize,
    /// Contexts per task for the per-epoch k-NN diagnostic.
    pub rep_resamples: usize,
}

impl TrainConfig {
    /// Hyperparameters as published, with the full step budget.
    pub fn published(family: Family) -> Self {
        TrainConfig {
            family,
            n_train_tasks: 10,
            epochs: 1000,
            steps_per_epoch: 200,
            tae_batch: 256,
            rl_batch: 256,
            k1: 64,
            k2: 192,
            relabel_noise: 0.0,
            latent_dim: 5,
            tae_lr: 3e-4,
            rl_lr: 3e-4,
            gamma: match family {
                Family::PointRobot => 0.9,
                Family::PointMassParams => 0.99,
            },
            alpha: 2.5,
            tae_loss_weight: 10.0,
            variant: Variant::Gentle,
            oracle_model: false,
            seed: 0,
            tae_hidden_width: 256,
            tae_hidden_layers: 3,
            rl_hidden_width: 64,
            rl_hidden_layers: 3,
            tau: 0.005,
            policy_delay: 2,
            target_noise: 0.2,
            noise_clip: 0.5,
            eval_every: 10,
            eval_probe_tasks: 3,
            eval_episodes: 10,
            rep_resamples: 10,
        }
    }

    /// Budget that runs in minutes on one core: 50 x 200 steps, narrower
    /// auto-encoder and smaller per-task batches. The augmentation buffer
    /// matches the size of a 100-trajectory PointRobot dataset, so about
    /// half of every context is relabeled. Alpha is lowered because the
    /// scripted experts drive rewards to zero, which makes mean |Q| small
    /// and lambda large enough to swamp the cloning term.
    pub fn desk(family: Family) -> Self {
        TrainConfig {
            alpha: DESK_ALPHA,
            epochs: 50,
            steps_per_epoch: 200,
            tae_batch: 64,
            rl_batch: 64,
            k1: 500,
            k2: 1500,
            tae_hidden_width: 64,
            ..Self::published(family)
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Fraction of the published gradient-step budget this run uses.
    pub fn budget_fraction(&self) -> f64 {
        self.total_steps() as f64 / PUBLISHED_TRAINING_STEPS as f64
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            k1: self.k1,
            k2: self.k2,
            no_policy_relabel: self.variant == Variant::NoPolicyRelabel,
            oracle_model: self.oracle_model,
            action_noise: self.relabel_noise,
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            gamma: self.gamma,
            alpha: self.alpha,
            tau: self.tau,
            policy_delay: self.policy_delay,
            target_noise: self.target_noise,
            noise_clip: self.noise_clip,
            actor_lr: self.rl_lr,
            critic_lr: self.rl_lr,
            hidden_width: self.rl_hidden_width,
            hidden_layers: self.rl_hidden_layers,
        }
    }

    pub fn tae_shape(&self) -> TaeShape {
        TaeShape::for_family(self.family, self.latent_dim, self.tae_hidden_width, self.tae_hidden_layers)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_train_tasks", self.n_train_tasks),
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("tae_batch", self.tae_batch),
            ("rl_batch", self.rl_batch),
            ("latent_dim", self.latent_dim),
            ("tae_hidden_width", self.tae_hidden_width),
            ("tae_hidden_layers", self.tae_hidden_layers),
            ("eval_every", self.eval_every),
            ("eval_probe_tasks", self.eval_probe_tasks),
            ("eval_episodes", self.eval_episodes),
            ("rep_resamples", self.rep_resamples),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(GentleError::config(format!("`{name}` must be at least 1")));
        }
        if self.tae_lr <= 0.0 || self.tae_loss_weight <= 0.0 {
            return Err(GentleError::config("`tae_lr` and `tae_loss_weight` must be positive"));
        }
        self.rl_config().validate()?;
        if self.variant.relabels() {
            self.augment_config().validate()?;
            if self.k2 > 0 && self.n_train_tasks < 2 {
                return Err(GentleError::config("`k2` > 0 needs at least 2 training tasks"));
            }
        } else if self.oracle_model {
            return Err(GentleError::config("`oracle_model` has no effect with variant no_relabel"));
        }
        if self.variant == Variant::Contrastive && self.n_train_tasks < 2 {
            return Err(GentleError::config("the contrastive variant needs at least 2 training tasks"));
        }
        if self.rep_resamples < 2 && self.n_train_tasks < 2 {
            return Err(GentleError::config("k-NN diagnostics need at least 2 points"));
        }
        Ok(())
    }

    /// Parses a flat JSON config; a missing key is reported by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| GentleError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Datasets and label models for the training tasks, in task order.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    /// Offline data the policy learns from.
    pub rl_data: &'a [TaskDataset],
    /// Data the auto-encoder and relabeling draw from; usually `rl_data`.
    pub context_data: &'a [TaskDataset],
    /// One model per task; unused under `oracle_model` or `no_relabel`.
    pub models: &'a [LabelModel],
}

impl<'a> TrainInputs<'a> {
    pub fn new(data: &'a [TaskDataset], models: &'a [LabelModel]) -> Self {
        TrainInputs {
            rl_data: data,
            context_data: data,
            models,
        }
    }
}

pub struct RunArtifacts {
    pub tae: TaePair,
    pub policy: ActorCritic,
    pub metrics: Vec<MetricRow>,
    /// Final representation of each training task.
    pub train_reps: Vec<Latent>,
}

/// Named RNG streams; changing one component leaves the others untouched.
struct Streams {
    relabel: Rng,
    tae: Rng,
    rl: Rng,
    eval: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let root = Rng::new(seed);
        Streams {
            relabel: root.named("relabel"),
            tae: root.named("tae"),
            rl: root.named("rl"),
            eval: root.named("eval"),
        }
    }
}

/// Uniform draw from the union of an augmentation buffer and a dataset.
fn sample_union<'a>(buffer: &'a AugmentBuffer, data: &'a TaskDataset, n: usize, rng: &mut Rng) -> Vec<&'a Transition> {
    let total = buffer.len() + data.len();
    (0..n)
        .map(|_| {
            let k = rng.below(total);
            if k < buffer.len() {
                &buffer.transitions[k]
            } else {
                &data.transitions[k - buffer.len()]
            }
        })
        .collect()
}

fn sample_contexts(family: Family, buffers: &[AugmentBuffer], data: &[TaskDataset], n: usize, rng: &mut Rng) -> Vec<ContextBatch> {
    buffers
        .iter()
        .zip(data)
        .map(|(b, d)| ContextBatch::from_transitions(family, sample_union(b, d, n, rng)))
        .collect()
}

/// Encodes one fresh context of size `n` per task from `D_i^aug ∪ D_i`.
/// The returned latents carry no gradient path back to the encoder.
pub fn compute_task_reps(tae: &TaePair, data: &[TaskDataset], buffers: &[AugmentBuffer], n: usize, seed: u64) -> Result<Vec<Latent>> {
    if data.len() != buffers.len() {
        return Err(GentleError::Dimension {
            context: "augmentation buffers",
            expected: data.len(),
            got: buffers.len(),
        });
    }
    let family = data.first().map(|d| d.family()).ok_or_else(|| GentleError::config("no tasks"))?;
    let contexts = sample_contexts(family, buffers, data, n, &mut Rng::new(seed));
    tae.encode_many(&contexts.iter().collect::<Vec<_>>())
}

fn check_inputs(cfg: &TrainConfig, inputs: &TrainInputs) -> Result<()> {
    let n = cfg.n_train_tasks;
    for (what, len) in [("rl_data", inputs.rl_data.len()), ("context_data", inputs.context_data.len())] {
        if len < n {
            return Err(GentleError::config(format!("{what} has {len} tasks, config asks for {n}")));
        }
    }
    let needs_models = cfg.variant.relabels() && !cfg.oracle_model;
    if needs_models && inputs.models.len() < n {
        return Err(GentleError::config(format!(
            "{} label models supplied, {n} needed for relabeling",
            inputs.models.len()
        )));
    }
    for d in inputs.rl_data[..n].iter().chain(&inputs.context_data[..n]) {
        if d.family() != cfg.family {
            return Err(GentleError::config(format!("task {} belongs to {}, config family is {}", d.task_id, d.family().name(), cfg.family.name())));
        }
        if d.is_empty() {
            return Err(GentleError::config(format!("task {} has an empty dataset", d.task_id)));
        }
    }
    for (a, b) in inputs.rl_data[..n].iter().zip(&inputs.context_data[..n]) {
        if a.spec != b.spec {
            return Err(GentleError::config(format!("rl and context data disagree on task {}", a.task_id)));
        }
    }
    Ok(())
}

pub fn meta_train(cfg: &TrainConfig, inputs: TrainInputs) -> Result<RunArtifacts> {
    meta_train_observed(cfg, inputs, |_| {})
}

/// Like [`meta_train`], calling `observe` with each epoch's metric rows.
pub fn meta_train_observed<F>(cfg: &TrainConfig, inputs: TrainInputs, mut observe: F) -> Result<RunArtifacts>
where
    F: FnMut(&[MetricRow]),
{
    cfg.validate()?;
    check_inputs(cfg, &inputs)?;
    let n = cfg.n_train_tasks;
    let rl_data = &inputs.rl_data[..n];
    let ctx_data = &inputs.context_data[..n];
    let models = if inputs.models.len() >= n { &inputs.models[..n] } else { &[][..] };
    let family = cfg.family;
    let env = family.config();
    let rl_cfg = cfg.rl_config();
    let aug_cfg = cfg.augment_config();

    let init = Rng::new(cfg.seed).named("model-init");
    let mut tae = TaePair::new(cfg.tae_shape(), &mut init.named("tae"));
    let mut policy = ActorCritic::new(
        family.state_dim(),
        family.action_dim(),
        cfg.latent_dim,
        env.action_bound,
        &rl_cfg,
        &mut init.named("policy"),
    );
    let mut enc_opt = Adam::new(tae.encoder.num_params(), cfg.tae_lr);
    let mut dec_opt = Adam::new(tae.decoder.num_params(), cfg.tae_lr);
    let mut streams = Streams::new(cfg.seed);

    let probe_tasks: Vec<(usize, TaskSpec)> = rl_data
        .iter()
        .take(cfg.eval_probe_tasks)
        .map(|d| (d.task_id, d.spec.clone()))
        .collect();
    let eval_cfg = EvalConfig {
        episodes: cfg.eval_episodes,
        context_size: cfg.tae_batch,
    };

    let mut zs: Vec<Latent> = vec![Latent::prior(cfg.latent_dim); n];
    let mut metrics = Vec::new();
    let mut buffers: Vec<AugmentBuffer> = (0..n).map(AugmentBuffer::empty).collect();

    for epoch in 0..cfg.epochs {
        if cfg.variant.relabels() {
            let seed = streams.relabel.stream(epoch as u64).next_u64();
            buffers = augment(ctx_data, models, &policy, &zs, &aug_cfg, seed)?;
        }
        let (mut tae_loss, mut critic_loss, mut actor_loss, mut lambda) = (0.0, 0.0, 0.0, 0.0);
        let mut actor_steps = 0usize;
        for _ in 0..cfg.steps_per_epoch {
            let contexts = sample_contexts(family, &buffers, ctx_data, cfg.tae_batch, &mut streams.tae);
            let refs: Vec<&ContextBatch> = contexts.iter().collect();
            let grads = if cfg.variant == Variant::Contrastive {
                let extra = sample_contexts(family, &buffers, ctx_data, cfg.tae_batch, &mut streams.tae);
                let groups: Vec<Vec<&ContextBatch>> = contexts.iter().zip(&extra).map(|(a, b)| vec![a, b]).collect();
                tae.contrastive_gradients(&groups)?
            } else {
                tae.reconstruction_gradients(&refs)?
            };
            if !grads.loss.is_finite() {
                return Err(GentleError::NonFinite("auto-encoder loss"));
            }
            tae_loss += grads.loss;
            let scale = |g: Vec<f64>| -> Vec<f64> { g.into_iter().map(|v| v * cfg.tae_loss_weight).collect() };
            enc_opt.step(tae.encoder.params_mut(), &scale(grads.encoder));
            if cfg.variant != Variant::Contrastive {
                dec_opt.step(tae.decoder.params_mut(), &scale(grads.decoder));
            }

            zs = tae.encode_many(&refs)?;

            let batches: Vec<RlBatch> = rl_data
                .iter()
                .zip(&zs)
                .map(|(d, z)| {
                    let picks: Vec<&Transition> = (0..cfg.rl_batch).map(|_| &d.transitions[streams.rl.below(d.len())]).collect();
                    RlBatch::from_transitions(&picks, z.clone())
                })
                .collect::<Result<_>>()?;
            let stats = policy.update(&batches, &rl_cfg, &mut streams.rl)?;
            critic_loss += stats.critic_loss;
            if let (Some(l), Some(lam)) = (stats.actor_loss, stats.lambda) {
                actor_loss += l;
                lambda += lam;
                actor_steps += 1;
            }
        }

        let step = (epoch + 1) * cfg.steps_per_epoch;
        let s = cfg.steps_per_epoch as f64;
        let mut rows = vec![
            MetricRow::new(epoch, step, "train", "tae_loss", tae_loss / s),
            MetricRow::new(epoch, step, "train", "critic_loss", critic_loss / s),
        ];
        if actor_steps > 0 {
            rows.push(MetricRow::new(epoch, step, "train", "actor_loss", actor_loss / actor_steps as f64));
            rows.push(MetricRow::new(epoch, step, "train", "lambda", lambda / actor_steps as f64));
        }
        let aug_size = buffers.iter().map(|b| b.len()).sum::<usize>() as f64 / n as f64;
        rows.push(MetricRow::new(epoch, step, "train", "aug_buffer_size", aug_size));

        let diag_seed = streams.eval.stream(2 * epoch as u64).next_u64();
        let refs: Vec<&TaskDataset> = ctx_data.iter().collect();
        let contexts = dataset_contexts(&refs, cfg.tae_batch, cfg.rep_resamples, diag_seed);
        let ids: Vec<usize> = ctx_data.iter().map(|d| d.task_id).collect();
        let diag = evalkit::rep_diagnostics(&tae, &contexts, &ids, KNN_K)?;
        rows.push(MetricRow::new(epoch, step, "train", "rep_knn", diag.accuracy));

        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let seed = streams.eval.stream(2 * epoch as u64 + 1).next_u64();
            let report = evalkit::evaluate(Protocol::OneShot, Split::Train, &policy, &tae, &probe_tasks, None, &eval_cfg, seed)?;
            rows.push(MetricRow::new(epoch, step, "train", "return_one_shot", report.mean));
        }
        observe(&rows);
        metrics.extend(rows);
    }

    let final_seed = streams.eval.named("final-reps").next_u64();
    let train_reps = compute_task_reps(&tae, ctx_data, &buffers, cfg.tae_batch, final_seed)?;
    Ok(RunArtifacts {
        tae,
        policy,
        metrics,
        train_reps,
    })
}

/// Saves encoder and decoder snapshots into `dir`.
pub fn save_tae(tae: &TaePair, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GentleError::io(dir, e))?;
    save_mlp(&tae.encoder, &dir.join("encoder.gntl"))?;
    save_mlp(&tae.decoder, &dir.join("decoder.gntl"))
}

pub fn load_tae(dir: &Path) -> Result<TaePair> {
    let encoder = load_mlp(&dir.join("encoder.gntl"))?;
    let decoder = load_mlp(&dir.join("decoder.gntl"))?;
    if decoder.in_dim() < encoder.out_dim() {
        return Err(GentleError::format(dir.join("decoder.gntl"), "decoder input narrower than the latent"));
    }
    Ok(TaePair { encoder, decoder })
}

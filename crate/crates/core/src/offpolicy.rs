//! TD3+BC over task-conditioned inputs.
//!
//! The actor maps `s ⊕ z` to a bounded action, twin critics score
//! `s ⊕ z ⊕ a`. Internally actions live in unit scale `a / bound`, so the
//! behavior-cloning term and the target smoothing noise mean the same thing
//! for every family; only [`ActorCritic::act`] and [`Policy::act_batch`]
//! return environment-scale actions. One update consumes a batch per task,
//! each with its own detached latent; losses are averaged over tasks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Transition;
use crate::error::{GentleError, Result};
use crate::numkit::snapshot::{load_mlp, save_mlp};
use crate::numkit::{soft_update, Activation, Adam, Matrix, Mlp, Rng, Tape};
use crate::relabel::Policy;
use crate::tae::Latent;

/// Lower bound on the mean |Q| in the λ normalizer.
pub const LAMBDA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub tau: f64,
    pub policy_delay: u64,
    /// Target-policy smoothing noise in unit action scale.
    pub target_noise: f64,
    pub noise_clip: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            gamma: 0.9,
            alpha: 2.5,
            tau: 0.005,
            policy_delay: 2,
            target_noise: 0.2,
            noise_clip: 0.5,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            hidden_width: 64,
            hidden_layers: 3,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(GentleError::config("gamma must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(GentleError::config("tau must lie in [0, 1]"));
        }
        if self.alpha < 0.0 || self.target_noise < 0.0 || self.noise_clip < 0.0 {
            return Err(GentleError::config("alpha and target noise must be non-negative"));
        }
        if self.policy_delay == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(GentleError::config("policy delay and network sizes must be positive"));
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return Err(GentleError::config("learning rates must be positive"));
        }
        Ok(())
    }
}

/// `alpha / max(mean |Q|, 1e-8)`.
pub fn compute_lambda(q_values: &[f64], alpha: f64) -> f64 {
    assert!(!q_values.is_empty(), "lambda needs at least one Q value");
    let mean = q_values.iter().map(|q| q.abs()).sum::<f64>() / q_values.len() as f64;
    alpha / mean.max(LAMBDA_FLOOR)
}

/// Transitions from one task with that task's latent.
#[derive(Debug, Clone, PartialEq)]
pub struct RlBatch {
    pub s: Matrix,
    pub a: Matrix,
    pub s_next: Matrix,
    pub r: Vec<f64>,
    pub z: Latent,
}

impl RlBatch {
    pub fn from_transitions(transitions: &[&Transition], z: Latent) -> Result<Self> {
        if transitions.is_empty() {
            return Err(GentleError::config("RL batch needs at least one transition"));
        }
        let rows = |f: fn(&Transition) -> &Vec<f64>| Matrix::from_rows(&transitions.iter().map(|t| f(t)).collect::<Vec<_>>());
        Ok(RlBatch {
            s: rows(|t| &t.s)?,
            a: rows(|t| &t.a)?,
            s_next: rows(|t| &t.s_next)?,
            r: transitions.iter().map(|t| t.r).collect(),
            z,
        })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Stacks `[states_k, z]` rows for every batch.
fn stack_with_latent(batches: &[RlBatch], pick: fn(&RlBatch) -> &Matrix) -> Matrix {
    let total: usize = batches.iter().map(|b| b.len()).sum();
    let sd = pick(&batches[0]).cols();
    let m = batches[0].z.dim();
    let mut out = Matrix::zeros(total, sd + m);
    let mut row = 0;
    for b in batches {
        let s = pick(b);
        for k in 0..b.len() {
            let dst = out.row_mut(row);
            dst[..sd].copy_from_slice(s.row(k));
            dst[sd..].copy_from_slice(b.z.as_slice());
            row += 1;
        }
    }
    out
}

/// Appends action columns to `[s, z]` rows.
fn with_actions(sz: &Matrix, a: &Matrix) -> Matrix {
    Matrix::hcat(&[sz, a]).expect("row counts match")
}

/// Per-row weight `1 / (n_tasks * batch_len)`, so that summing weighted
/// per-row terms gives the mean over tasks of per-task means.
fn row_weights(batches: &[RlBatch]) -> Vec<f64> {
    let n = batches.len() as f64;
    batches
        .iter()
        .flat_map(|b| std::iter::repeat_n(1.0 / (n * b.len() as f64), b.len()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub critic_loss: f64,
    /// Present on steps where the actor was updated.
    pub actor_loss: Option<f64>,
    /// Mean over task batches of the per-batch λ.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CriticGradients {
    pub loss: f64,
    pub critic1: Vec<f64>,
    pub critic2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ActorGradients {
    pub loss: f64,
    pub lambdas: Vec<f64>,
    pub actor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub action_bound: f64,
    pub updates: u64,
}

#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub actor_target: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    pub action_bound: f64,
    state_dim: usize,
    latent_dim: usize,
    updates: u64,
    actor_opt: Adam,
    critic1_opt: Adam,
    critic2_opt: Adam,
}

impl ActorCritic {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        latent_dim: usize,
        action_bound: f64,
        cfg: &RlConfig,
        rng: &mut Rng,
    ) -> Self {
        let hidden = vec![cfg.hidden_width; cfg.hidden_layers];
        let dims = |input: usize, output: usize| {
            let mut d = vec![input];
            d.extend(&hidden);
            d.push(output);
            d
        };
        let actor = Mlp::new(
            &dims(state_dim + latent_dim, action_dim),
            Activation::Relu,
            Activation::Tanh,
            &mut rng.named("actor"),
        );
        let critic_dims = dims(state_dim + latent_dim + action_dim, 1);
        let critic1 = Mlp::new(&critic_dims, Activation::Relu, Activation::Identity, &mut rng.named("critic1"));
        let critic2 = Mlp::new(&critic_dims, Activation::Relu, Activation::Identity, &mut rng.named("critic2"));
        Self::from_nets(actor, critic1, critic2, state_dim, latent_dim, action_bound, cfg)
    }

    fn from_nets(
        actor: Mlp,
        critic1: Mlp,
        critic2: Mlp,
        state_dim: usize,
        latent_dim: usize,
        action_bound: f64,
        cfg: &RlConfig,
    ) -> Self {
        ActorCritic {
            actor_opt: Adam::new(actor.num_params(), cfg.actor_lr),
            critic1_opt: Adam::new(critic1.num_params(), cfg.critic_lr),
            critic2_opt: Adam::new(critic2.num_params(), cfg.critic_lr),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            action_bound,
            state_dim,
            latent_dim,
            updates: 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn action_dim(&self) -> usize {
        self.actor.out_dim()
    }

    /// Critic updates performed so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn check_batches(&self, batches: &[RlBatch]) -> Result<()> {
        if batches.is_empty() || batches.iter().any(|b| b.is_empty()) {
            return Err(GentleError::config("RL update needs non-empty task batches"));
        }
        for b in batches {
            if b.s.cols() != self.state_dim || b.s_next.cols() != self.state_dim {
                return Err(GentleError::Dimension {
                    context: "RL batch states",
                    expected: self.state_dim,
                    got: b.s.cols(),
                });
            }
            if b.a.cols() != self.action_dim() {
                return Err(GentleError::Dimension {
                    context: "RL batch actions",
                    expected: self.action_dim(),
                    got: b.a.cols(),
                });
            }
            if b.z.dim() != self.latent_dim {
                return Err(GentleError::Dimension {
                    context: "RL batch latent",
                    expected: self.latent_dim,
                    got: b.z.dim(),
                });
            }
        }
        Ok(())
    }

    fn scaled(&self, unit: &Matrix) -> Matrix {
        let mut out = unit.clone();
        out.data_mut().iter_mut().for_each(|v| *v *= self.action_bound);
        out
    }

    /// Dataset actions of every batch in unit scale.
    fn unit_actions(&self, batches: &[RlBatch]) -> Matrix {
        let mut a = stack_actions(batches);
        a.data_mut().iter_mut().for_each(|v| *v /= self.action_bound);
        a
    }

    /// Deterministic action for one state.
    pub fn act(&self, s: &[f64], z: &Latent) -> Result<Vec<f64>> {
        let input: Vec<f64> = s.iter().chain(z.as_slice()).copied().collect();
        Ok(self.actor.forward(&input)?.into_iter().map(|v| v * self.action_bound).collect())
    }

    /// TD targets `r + γ min(Q1', Q2')(s', ã)` stacked over batches.
    pub fn critic_targets(&self, batches: &[RlBatch], cfg: &RlConfig, rng: &mut Rng) -> Vec<f64> {
        let next = stack_with_latent(batches, |b| &b.s_next);
        let mut a_next = self.actor_target.forward_batch(&next).expect("actor width");
        for v in a_next.data_mut() {
            let noise = (cfg.target_noise * rng.normal()).clamp(-cfg.noise_clip, cfg.noise_clip);
            *v = (*v + noise).clamp(-1.0, 1.0);
        }
        let input = with_actions(&next, &a_next);
        let q1 = self.critic1_target.forward_batch(&input).expect("critic width");
        let q2 = self.critic2_target.forward_batch(&input).expect("critic width");
        let rewards = batches.iter().flat_map(|b| b.r.iter().copied());
        rewards
            .zip(q1.data().iter().zip(q2.data()))
            .map(|(r, (a, b))| r + cfg.gamma * a.min(*b))
            .collect()
    }

    /// Mean over tasks of `mean_k (Q1 - y)^2 + (Q2 - y)^2` and its gradients.
    pub fn critic_gradients(&self, batches: &[RlBatch], targets: &[f64]) -> CriticGradients {
        let sz = stack_with_latent(batches, |b| &b.s);
        let a = self.unit_actions(batches);
        let input = with_actions(&sz, &a);
        let weights = row_weights(batches);
        let mut loss = 0.0;
        let mut grad_for = |net: &Mlp| {
            let tape = net.forward_tape(input.clone());
            let mut d = Matrix::zeros(targets.len(), 1);
            for (k, ((q, y), w)) in tape.output().data().iter().zip(targets).zip(&weights).enumerate() {
                loss += w * (q - y).powi(2);
                d.set(k, 0, 2.0 * w * (q - y));
            }
            let mut g = net.zero_grads();
            net.backward(&tape, d, &mut g, false);
            g
        };
        let critic1 = grad_for(&self.critic1);
        let critic2 = grad_for(&self.critic2);
        CriticGradients { loss, critic1, critic2 }
    }

    /// Mean over tasks of `mean_k [-λ_t Q1(s, π(s)) + ||π(s) - a||^2]` (unit
    /// action scale) and the actor gradient. Each `λ_t` is computed from that
    /// batch's Q1 values and treated as a constant.
    pub fn actor_gradients(&self, batches: &[RlBatch], alpha: f64) -> ActorGradients {
        let sz = stack_with_latent(batches, |b| &b.s);
        let a_data = self.unit_actions(batches);
        let actor_tape: Tape = self.actor.forward_tape(sz.clone());
        let pi = actor_tape.output().clone();
        let critic_tape = self.critic1.forward_tape(with_actions(&sz, &pi));
        let q = critic_tape.output().data();
        let weights = row_weights(batches);
        let mut lambdas = Vec::with_capacity(batches.len());
        let mut row_lambda = Vec::with_capacity(q.len());
        let mut start = 0;
        for b in batches {
            let lam = compute_lambda(&q[start..start + b.len()], alpha);
            lambdas.push(lam);
            row_lambda.extend(std::iter::repeat_n(lam, b.len()));
            start += b.len();
        }
        let ad = self.action_dim();
        let mut loss = 0.0;
        let mut d_q = Matrix::zeros(q.len(), 1);
        for k in 0..q.len() {
            let bc: f64 = pi.row(k).iter().zip(a_data.row(k)).map(|(p, a)| (p - a).powi(2)).sum();
            loss += weights[k] * (-row_lambda[k] * q[k] + bc);
            d_q.set(k, 0, -weights[k] * row_lambda[k]);
        }
        let mut scratch = self.critic1.zero_grads();
        let d_input = self
            .critic1
            .backward(&critic_tape, d_q, &mut scratch, true)
            .expect("input gradient requested");
        let in_w = d_input.cols();
        let mut d_raw = Matrix::zeros(q.len(), ad);
        for k in 0..q.len() {
            let dq_da = &d_input.row(k)[in_w - ad..];
            for j in 0..ad {
                let bc = 2.0 * weights[k] * (pi.get(k, j) - a_data.get(k, j));
                d_raw.set(k, j, dq_da[j] + bc);
            }
        }
        let mut actor = self.actor.zero_grads();
        self.actor.backward(&actor_tape, d_raw, &mut actor, false);
        ActorGradients { loss, lambdas, actor }
    }

    /// One critic step on all task batches; returns the critic loss.
    pub fn critic_update(&mut self, batches: &[RlBatch], cfg: &RlConfig, rng: &mut Rng) -> Result<f64> {
        self.check_batches(batches)?;
        let targets = self.critic_targets(batches, cfg, rng);
        let g = self.critic_gradients(batches, &targets);
        if !g.loss.is_finite() {
            return Err(GentleError::NonFinite("critic loss"));
        }
        self.critic1_opt.step(self.critic1.params_mut(), &g.critic1);
        self.critic2_opt.step(self.critic2.params_mut(), &g.critic2);
        self.updates += 1;
        Ok(g.loss)
    }

    /// One actor step followed by a soft update of all targets.
    /// Returns the actor loss and the mean per-batch λ.
    pub fn actor_update(&mut self, batches: &[RlBatch], cfg: &RlConfig) -> Result<(f64, f64)> {
        self.check_batches(batches)?;
        let g = self.actor_gradients(batches, cfg.alpha);
        if !g.loss.is_finite() {
            return Err(GentleError::NonFinite("actor loss"));
        }
        self.actor_opt.step(self.actor.params_mut(), &g.actor);
        self.soft_update_targets(cfg.tau);
        let lambda = g.lambdas.iter().sum::<f64>() / g.lambdas.len() as f64;
        Ok((g.loss, lambda))
    }

    /// Critic update every call, actor and target update every `policy_delay` calls.
    pub fn update(&mut self, batches: &[RlBatch], cfg: &RlConfig, rng: &mut Rng) -> Result<StepStats> {
        let critic_loss = self.critic_update(batches, cfg, rng)?;
        let (actor_loss, lambda) = if self.updates.is_multiple_of(cfg.policy_delay) {
            let (l, lam) = self.actor_update(batches, cfg)?;
            (Some(l), Some(lam))
        } else {
            (None, None)
        };
        Ok(StepStats {
            critic_loss,
            actor_loss,
            lambda,
        })
    }

    pub fn soft_update_targets(&mut self, tau: f64) {
        soft_update(self.actor_target.params_mut(), self.actor.params(), tau);
        soft_update(self.critic1_target.params_mut(), self.critic1.params(), tau);
        soft_update(self.critic2_target.params_mut(), self.critic2.params(), tau);
    }

    pub fn meta(&self) -> PolicyMeta {
        PolicyMeta {
            state_dim: self.state_dim,
            action_dim: self.action_dim(),
            latent_dim: self.latent_dim,
            action_bound: self.action_bound,
            updates: self.updates,
        }
    }

    /// Writes online nets and metadata into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| GentleError::io(dir, e))?;
        save_mlp(&self.actor, &dir.join("actor.gntl"))?;
        save_mlp(&self.critic1, &dir.join("critic1.gntl"))?;
        save_mlp(&self.critic2, &dir.join("critic2.gntl"))?;
        let path = dir.join("policy.json");
        let text = serde_json::to_string_pretty(&self.meta()).expect("metadata serializes");
        std::fs::write(&path, text).map_err(|e| GentleError::io(&path, e))
    }

    /// Restores online nets; targets start as copies and optimizers fresh.
    pub fn load(dir: &Path, cfg: &RlConfig) -> Result<Self> {
        let path = dir.join("policy.json");
        let text = std::fs::read_to_string(&path).map_err(|e| GentleError::io(&path, e))?;
        let meta: PolicyMeta = serde_json::from_str(&text).map_err(|e| GentleError::format(&path, e.to_string()))?;
        let actor = load_mlp(&dir.join("actor.gntl"))?;
        let critic1 = load_mlp(&dir.join("critic1.gntl"))?;
        let critic2 = load_mlp(&dir.join("critic2.gntl"))?;
        if actor.in_dim() != meta.state_dim + meta.latent_dim || actor.out_dim() != meta.action_dim {
            return Err(GentleError::format(&path, "actor shape disagrees with metadata"));
        }
        let mut out = Self::from_nets(actor, critic1, critic2, meta.state_dim, meta.latent_dim, meta.action_bound, cfg);
        out.updates = meta.updates;
        Ok(out)
    }
}

fn stack_actions(batches: &[RlBatch]) -> Matrix {
    let total: usize = batches.iter().map(|b| b.len()).sum();
    let ad = batches[0].a.cols();
    let mut data = Vec::with_capacity(total * ad);
    for b in batches {
        data.extend_from_slice(b.a.data());
    }
    Matrix::from_vec(total, ad, data).expect("action widths checked")
}

impl Policy for ActorCritic {
    fn act_batch(&self, states: &Matrix, z: &Latent) -> Matrix {
        let mut input = Matrix::zeros(states.rows(), states.cols() + z.dim());
        for r in 0..states.rows() {
            let dst = input.row_mut(r);
            dst[..states.cols()].copy_from_slice(states.row(r));
            dst[states.cols()..].copy_from_slice(z.as_slice());
        }
        self.scaled(&self.actor.forward_batch(&input).expect("actor width"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::check_gradient;

    fn tiny_cfg() -> RlConfig {
        RlConfig {
            hidden_width: 8,
            hidden_layers: 2,
            ..RlConfig::default()
        }
    }

    fn random_batch(rng: &mut Rng, n: usize, bound: f64) -> RlBatch {
        let mut m = |c: usize, scale: f64| Matrix::from_vec(n, c, (0..n * c).map(|_| scale * rng.normal()).collect()).unwrap();
        let s = m(2, 1.0);
        let a = m(2, bound * 0.5);
        let s_next = m(2, 1.0);
        RlBatch {
            s,
            a,
            s_next,
            r: (0..n).map(|_| rng.normal()).collect(),
            z: Latent((0..3).map(|_| rng.uniform_range(-0.9, 0.9)).collect()),
        }
    }

    fn net(seed: u64) -> ActorCritic {
        ActorCritic::new(2, 2, 3, 0.7, &tiny_cfg(), &mut Rng::new(seed))
    }

    #[test]
    fn lambda_examples() {
        assert!((compute_lambda(&[1.0, -3.0, 2.0], 2.5) - 1.25).abs() < 1e-15);
        assert_eq!(compute_lambda(&[0.0, 0.0], 2.5), 2.5 / 1e-8);
        assert_eq!(RlConfig::default().alpha, 2.5);
        assert_eq!(RlConfig::default().gamma, 0.9);
    }

    #[test]
    fn zero_discount_targets_are_rewards() {
        let ac = net(1);
        let mut rng = Rng::new(2);
        let b = random_batch(&mut rng, 5, 0.7);
        let cfg = RlConfig { gamma: 0.0, ..tiny_cfg() };
        assert_eq!(ac.critic_targets(std::slice::from_ref(&b), &cfg, &mut rng), b.r);
    }

    #[test]
    fn targets_use_twin_minimum() {
        let mut ac = net(3);
        // constant target critics: Q1' = 1, Q2' = 2
        ac.critic1_target.params_mut().fill(0.0);
        ac.critic2_target.params_mut().fill(0.0);
        let n = ac.critic1_target.num_params();
        ac.critic1_target.params_mut()[n - 1] = 1.0;
        ac.critic2_target.params_mut()[n - 1] = 2.0;
        let mut rng = Rng::new(4);
        let b = random_batch(&mut rng, 4, 0.7);
        let cfg = RlConfig { gamma: 0.5, ..tiny_cfg() };
        let y = ac.critic_targets(std::slice::from_ref(&b), &cfg, &mut rng);
        for (y, r) in y.iter().zip(&b.r) {
            assert!((y - (r + 0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn actions_stay_in_bounds() {
        let mut ac = net(5);
        ac.actor.params_mut().iter_mut().for_each(|p| *p *= 50.0);
        let mut rng = Rng::new(6);
        let b = random_batch(&mut rng, 64, 0.7);
        let a = ac.act_batch(&b.s, &b.z);
        assert!(a.data().iter().all(|v| v.abs() <= 0.7));
        assert_eq!(ac.act(b.s.row(0), &b.z).unwrap(), a.row(0));
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let ac = net(7);
        let mut rng = Rng::new(8);
        let batches = vec![random_batch(&mut rng, 6, 0.7), random_batch(&mut rng, 3, 0.7)];
        let targets: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let g = ac.critic_gradients(&batches, &targets);
        let report = check_gradient(
            |p| {
                let mut q = ac.clone();
                q.critic1.params_mut().copy_from_slice(p);
                q.critic_gradients(&batches, &targets).loss
            },
            ac.critic1.params(),
            &g.critic1,
            1e-6,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let ac = net(10 + seed);
            let mut rng = Rng::new(20 + seed);
            let batches = vec![random_batch(&mut rng, 5, 0.7), random_batch(&mut rng, 7, 0.7)];
            let g = ac.actor_gradients(&batches, 2.5);
            // λ is a constant in the objective; hold it fixed while perturbing
            let lambdas = g.lambdas.clone();
            let loss_at = |p: &[f64]| {
                let mut q = ac.clone();
                q.actor.params_mut().copy_from_slice(p);
                fixed_lambda_actor_loss(&q, &batches, &lambdas)
            };
            assert!((loss_at(ac.actor.params()) - g.loss).abs() < 1e-12);
            let report = check_gradient(loss_at, ac.actor.params(), &g.actor, 1e-6);
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    /// Independent per-row evaluation of the actor objective.
    fn fixed_lambda_actor_loss(ac: &ActorCritic, batches: &[RlBatch], lambdas: &[f64]) -> f64 {
        let mut total = 0.0;
        for (b, lam) in batches.iter().zip(lambdas) {
            let mut sum = 0.0;
            for k in 0..b.len() {
                let bound = ac.action_bound;
                let pi: Vec<f64> = ac.act(b.s.row(k), &b.z).unwrap().iter().map(|v| v / bound).collect();
                let input: Vec<f64> = b.s.row(k).iter().chain(b.z.as_slice()).chain(&pi).copied().collect();
                let q = ac.critic1.forward(&input).unwrap()[0];
                let bc: f64 = pi.iter().zip(b.a.row(k)).map(|(p, a)| (p - a / bound).powi(2)).sum();
                sum += -lam * q + bc;
            }
            total += sum / b.len() as f64;
        }
        total / batches.len() as f64
    }

    #[test]
    fn zero_lambda_bc_at_matching_actions_is_zero() {
        let ac = net(30);
        let mut rng = Rng::new(31);
        let mut b = random_batch(&mut rng, 6, 0.7);
        b.a = ac.act_batch(&b.s, &b.z);
        let g = ac.actor_gradients(&[b], 0.0);
        assert!(g.loss.abs() < 1e-15);
        assert!(g.actor.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn behavior_cloning_anchors_actor() {
        let cfg = RlConfig {
            alpha: 0.0,
            actor_lr: 1e-3,
            ..tiny_cfg()
        };
        let mut ac = ActorCritic::new(2, 2, 3, 0.7, &cfg, &mut Rng::new(40));
        let mut rng = Rng::new(41);
        let batch = vec![random_batch(&mut rng, 32, 0.7)];
        let bc = |ac: &ActorCritic| ac.actor_gradients(&batch, 0.0).loss;
        let mut last = bc(&ac);
        for _ in 0..10 {
            for _ in 0..50 {
                ac.actor_update(&batch, &cfg).unwrap();
            }
            let now = bc(&ac);
            assert!(now < last, "{now} >= {last}");
            last = now;
        }
    }

    #[test]
    fn target_lag_is_exact() {
        let mut ac = net(50);
        let mut rng = Rng::new(51);
        let batch = vec![random_batch(&mut rng, 8, 0.7)];
        let cfg = tiny_cfg();
        ac.critic_update(&batch, &cfg, &mut rng).unwrap();
        let old_target = ac.critic1_target.params().to_vec();
        ac.actor_update(&batch, &cfg).unwrap();
        for ((t, o), p) in ac.critic1_target.params().iter().zip(&old_target).zip(ac.critic1.params()) {
            assert_eq!(*t, (1.0 - cfg.tau) * o + cfg.tau * p);
        }
    }

    #[test]
    fn actor_updates_follow_delay() {
        let mut ac = net(60);
        let mut rng = Rng::new(61);
        let batch = vec![random_batch(&mut rng, 8, 0.7)];
        let cfg = tiny_cfg();
        let flags: Vec<bool> = (0..6)
            .map(|_| ac.update(&batch, &cfg, &mut rng).unwrap().actor_loss.is_some())
            .collect();
        assert_eq!(flags, [false, true, false, true, false, true]);
        assert_eq!(ac.updates(), 6);
    }

    #[test]
    fn critic_learns_fixed_targets() {
        let cfg = RlConfig {
            gamma: 0.0,
            critic_lr: 1e-2,
            ..tiny_cfg()
        };
        let mut ac = ActorCritic::new(2, 2, 3, 0.7, &cfg, &mut Rng::new(70));
        let mut rng = Rng::new(71);
        let batch = vec![random_batch(&mut rng, 16, 0.7)];
        let first = ac.critic_update(&batch, &cfg, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..300 {
            last = ac.critic_update(&batch, &cfg, &mut rng).unwrap();
        }
        assert!(last < 0.1 * first, "{last} vs {first}");
    }

    #[test]
    fn mismatched_batches_rejected() {
        let mut ac = net(80);
        let mut rng = Rng::new(81);
        let mut b = random_batch(&mut rng, 4, 0.7);
        b.z = Latent(vec![0.0; 2]);
        assert!(ac.critic_update(&[b], &tiny_cfg(), &mut rng).is_err());
        assert!(ac.critic_update(&[], &tiny_cfg(), &mut rng).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let ac = net(90);
        let dir = tempfile::tempdir().unwrap();
        ac.save(dir.path()).unwrap();
        let back = ActorCritic::load(dir.path(), &tiny_cfg()).unwrap();
        assert_eq!(back.actor, ac.actor);
        assert_eq!(back.critic2, ac.critic2);
        assert_eq!(back.meta(), ac.meta());
    }
}

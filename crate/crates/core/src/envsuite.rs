//! Task families: deterministic point-mass MDPs with exact oracle models.
//!
//! * `PointRobot` - 2-D position, the action is a displacement, reward is
//!   the negative distance to a hidden goal. Only the reward varies across
//!   tasks.
//! * `PointMassParams` - 2-D point mass with velocity state. Damping and
//!   mass are task-specific multipliers `1.5^mu`, `mu ~ U[-3, 3]`; reward
//!   tracks a fixed forward velocity, so the best action depends on the
//!   hidden dynamics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GentleError, Result};
use crate::numkit::Rng;

/// Half-width of the box every position is clipped to.
pub const SAFETY_BOX: f64 = 10.0;
/// Per-step velocity retention of `PointMassParams` at the default damping.
pub const BASE_RETENTION: f64 = 0.9;
/// Forward speed the `PointMassParams` reward asks for.
pub const TARGET_SPEED: f64 = 0.1;
/// Multipliers are `1.5^mu` with `mu` uniform in `[-MU_RANGE, MU_RANGE]`.
pub const MU_RANGE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PointRobot,
    PointMassParams,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::PointRobot, Family::PointMassParams];

    pub fn name(self) -> &'static str {
        match self {
            Family::PointRobot => "point_robot",
            Family::PointMassParams => "point_mass_params",
        }
    }

    pub fn config(self) -> EnvConfig {
        match self {
            Family::PointRobot => EnvConfig {
                horizon: 20,
                action_bound: 0.1,
                dt: 1.0,
                reward_only: true,
            },
            Family::PointMassParams => EnvConfig {
                horizon: 50,
                action_bound: 1.0,
                dt: 0.1,
                reward_only: false,
            },
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Family::PointRobot => 2,
            Family::PointMassParams => 4,
        }
    }

    pub fn action_dim(self) -> usize {
        2
    }

    /// Width of the label `y` the task models and the decoder predict:
    /// `(r)` when only rewards vary, `(s' - s, r)` otherwise.
    pub fn label_dim(self) -> usize {
        if self.config().reward_only {
            1
        } else {
            self.state_dim() + 1
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = GentleError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "point_robot" => Ok(Family::PointRobot),
            "point_mass_params" => Ok(Family::PointMassParams),
            other => Err(GentleError::config(format!("unknown task family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub horizon: usize,
    pub action_bound: f64,
    pub dt: f64,
    /// Tasks share dynamics and differ only in reward.
    pub reward_only: bool,
}

/// Hidden parameters of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum TaskSpec {
    PointRobot { goal: [f64; 2] },
    PointMassParams { damping_mult: f64, mass_mult: f64 },
}

impl TaskSpec {
    pub fn family(&self) -> Family {
        match self {
            TaskSpec::PointRobot { .. } => Family::PointRobot,
            TaskSpec::PointMassParams { .. } => Family::PointMassParams,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::PointRobot { goal } => {
                if goal.iter().any(|g| !(-1.0..=1.0).contains(g)) {
                    return Err(GentleError::config(format!("goal {goal:?} outside [-1, 1]^2")));
                }
            }
            TaskSpec::PointMassParams {
                damping_mult,
                mass_mult,
            } => {
                let (lo, hi) = (1.5f64.powf(-MU_RANGE), 1.5f64.powf(MU_RANGE));
                for m in [damping_mult, mass_mult] {
                    if !(lo - 1e-12..=hi + 1e-12).contains(&m) {
                        return Err(GentleError::config(format!(
                            "multiplier {m} outside [{lo}, {hi}]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Draws `count` i.i.d. tasks.
pub fn sample_tasks(family: Family, count: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if count == 0 {
        return Err(GentleError::config("task count must be at least 1"));
    }
    let mut rng = Rng::new(seed).named(family.name());
    Ok((0..count).map(|_| draw_task(family, &mut rng)).collect())
}

/// Train and test tasks from disjoint sub-streams of one seed.
pub fn sample_split(
    family: Family,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
    let train = sample_tasks(family, n_train, Rng::new(seed).named("train-tasks").next_u64())?;
    let test = if n_test == 0 {
        Vec::new()
    } else {
        sample_tasks(family, n_test, Rng::new(seed).named("test-tasks").next_u64())?
    };
    Ok((train, test))
}

fn draw_task(family: Family, rng: &mut Rng) -> TaskSpec {
    match family {
        Family::PointRobot => TaskSpec::PointRobot {
            goal: [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)],
        },
        Family::PointMassParams => {
            let damping_mu = rng.uniform_range(-MU_RANGE, MU_RANGE);
            let mass_mu = rng.uniform_range(-MU_RANGE, MU_RANGE);
            TaskSpec::PointMassParams {
                damping_mult: multiplier(damping_mu),
                mass_mult: multiplier(mass_mu),
            }
        }
    }
}

/// `1.5^mu`.
pub fn multiplier(mu: f64) -> f64 {
    1.5f64.powf(mu)
}

/// Initial state distribution: PointRobot uniform in `[-0.1, 0.1]^2`,
/// PointMassParams at rest at the origin.
pub fn initial_state(family: Family, rng: &mut Rng) -> Vec<f64> {
    match family {
        Family::PointRobot => vec![rng.uniform_range(-0.1, 0.1), rng.uniform_range(-0.1, 0.1)],
        Family::PointMassParams => vec![0.0; 4],
    }
}

pub fn clip_action(a: &[f64], bound: f64) -> Vec<f64> {
    a.iter().map(|v| v.clamp(-bound, bound)).collect()
}

fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GentleError::NonFinite(what))
    }
}

/// One deterministic transition. Actions are clipped to the family bound first.
pub fn env_step(spec: &TaskSpec, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, f64)> {
    let family = spec.family();
    if s.len() != family.state_dim() {
        return Err(GentleError::Dimension {
            context: "env_step state",
            expected: family.state_dim(),
            got: s.len(),
        });
    }
    if a.len() != family.action_dim() {
        return Err(GentleError::Dimension {
            context: "env_step action",
            expected: family.action_dim(),
            got: a.len(),
        });
    }
    check_finite(s, "env_step state")?;
    check_finite(a, "env_step action")?;
    let cfg = family.config();
    let a = clip_action(a, cfg.action_bound);
    Ok(match *spec {
        TaskSpec::PointRobot { goal } => {
            let next: Vec<f64> = s
                .iter()
                .zip(&a)
                .map(|(x, u)| (x + u * cfg.dt).clamp(-SAFETY_BOX, SAFETY_BOX))
                .collect();
            let r = -((next[0] - goal[0]).powi(2) + (next[1] - goal[1]).powi(2)).sqrt();
            (next, r)
        }
        TaskSpec::PointMassParams {
            damping_mult,
            mass_mult,
        } => {
            let retention = BASE_RETENTION.powf(damping_mult);
            let v = [
                retention * s[2] + a[0] / mass_mult * cfg.dt,
                retention * s[3] + a[1] / mass_mult * cfg.dt,
            ];
            let next = vec![
                (s[0] + v[0] * cfg.dt).clamp(-SAFETY_BOX, SAFETY_BOX),
                (s[1] + v[1] * cfg.dt).clamp(-SAFETY_BOX, SAFETY_BOX),
                v[0],
                v[1],
            ];
            let r = -((v[0] - TARGET_SPEED).powi(2) + v[1].powi(2)).sqrt();
            (next, r)
        }
    })
}

/// Oracle model `y = M(s, a)`: `(s', r)`, or `(r)` for reward-only families.
pub fn true_model(spec: &TaskSpec, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    let (next, r) = env_step(spec, s, a)?;
    if spec.family().config().reward_only {
        Ok(vec![r])
    } else {
        let mut y = next;
        y.push(r);
        Ok(y)
    }
}

/// Next state under the dynamics shared by every task of a reward-only family.
pub fn shared_dynamics(family: Family, s: &[f64], a: &[f64]) -> Option<Vec<f64>> {
    match family {
        Family::PointRobot => {
            let cfg = family.config();
            Some(
                s.iter()
                    .zip(clip_action(a, cfg.action_bound))
                    .map(|(x, u)| (x + u * cfg.dt).clamp(-SAFETY_BOX, SAFETY_BOX))
                    .collect(),
            )
        }
        Family::PointMassParams => None,
    }
}

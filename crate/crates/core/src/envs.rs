//! Deterministic toy environments with actions in `[-1, 1]^|A|`.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::mean_and_se;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
}

/// Environment selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    MultiModalBandit,
    PointMassTwoGoals,
    PendulumSwingUp,
}

/// Full simulator state; observations are derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    /// Steps taken in the current episode.
    pub t: usize,
    pub physical: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next: EnvState,
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

const BANDIT_CENTRE: [f64; 2] = [0.6, 0.6];
const BANDIT_WIDTH: f64 = 0.08;

const POINT_DT: f64 = 0.1;
const POINT_GOALS: [[f64; 2]; 2] = [[1.0, 0.0], [-1.0, 0.0]];
const POINT_WIDTH: f64 = 0.5;
const POINT_ACTION_COST: f64 = 0.01;
const POINT_RESET_SPREAD: f64 = 0.1;

const PENDULUM_DT: f64 = 0.05;
const PENDULUM_G: f64 = 10.0;
const PENDULUM_M: f64 = 1.0;
const PENDULUM_L: f64 = 1.0;
const PENDULUM_TORQUE: f64 = 2.0;
const PENDULUM_MAX_SPEED: f64 = 8.0;

/// Bandit reward: two Gaussian bumps at `+c` and `-c`.
pub fn bandit_reward(a: &[f64]) -> f64 {
    let (mut near, mut far) = (0.0, 0.0);
    for (ai, ci) in a.iter().zip(BANDIT_CENTRE) {
        near += (ai - ci) * (ai - ci);
        far += (ai + ci) * (ai + ci);
    }
    (-near / BANDIT_WIDTH).exp() + (-far / BANDIT_WIDTH).exp()
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::MultiModalBandit => "multi_modal_bandit",
            EnvKind::PointMassTwoGoals => "point_mass_two_goals",
            EnvKind::PendulumSwingUp => "pendulum_swing_up",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        [EnvKind::MultiModalBandit, EnvKind::PointMassTwoGoals, EnvKind::PendulumSwingUp]
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown env {name:?}")))
    }

    pub fn spec(self) -> EnvSpec {
        let (state_dim, action_dim, horizon) = match self {
            EnvKind::MultiModalBandit => (1, 2, 1),
            EnvKind::PointMassTwoGoals => (4, 2, 50),
            EnvKind::PendulumSwingUp => (3, 1, 200),
        };
        EnvSpec {
            name: self.name().to_string(),
            state_dim,
            action_dim,
            horizon,
        }
    }

    pub fn reset(self, rng: &mut dyn RngCore) -> EnvState {
        let physical = match self {
            EnvKind::MultiModalBandit => vec![],
            EnvKind::PointMassTwoGoals => vec![
                rng.random_range(-POINT_RESET_SPREAD..=POINT_RESET_SPREAD),
                rng.random_range(-POINT_RESET_SPREAD..=POINT_RESET_SPREAD),
                0.0,
                0.0,
            ],
            EnvKind::PendulumSwingUp => vec![rng.random_range(-PI..=PI), rng.random_range(-1.0..=1.0)],
        };
        EnvState { t: 0, physical }
    }

    /// Initial state drawn from a generator seeded with `seed`.
    pub fn reset_seeded(self, seed: u64) -> EnvState {
        self.reset(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn observe(self, state: &EnvState) -> Vec<f64> {
        match self {
            EnvKind::MultiModalBandit => vec![0.0],
            EnvKind::PointMassTwoGoals => state.physical.clone(),
            EnvKind::PendulumSwingUp => {
                let (th, w) = (state.physical[0], state.physical[1]);
                vec![th.cos(), th.sin(), w]
            }
        }
    }

    pub fn step(self, state: &EnvState, action: &[f64]) -> Result<StepResult> {
        let spec = self.spec();
        if action.len() != spec.action_dim {
            return Err(Error::InvalidArgument(format!(
                "{} expects {} action dims, got {}",
                spec.name,
                spec.action_dim,
                action.len()
            )));
        }
        if let Some(a) = action.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
            return Err(Error::InvalidArgument(format!("action component {a} outside [-1, 1]")));
        }
        let (physical, reward) = match self {
            EnvKind::MultiModalBandit => (vec![], bandit_reward(action)),
            EnvKind::PointMassTwoGoals => {
                let p = &state.physical;
                let vx = p[2] + action[0] * POINT_DT;
                let vy = p[3] + action[1] * POINT_DT;
                let x = p[0] + vx * POINT_DT;
                let y = p[1] + vy * POINT_DT;
                let goal = POINT_GOALS
                    .iter()
                    .map(|g| (-((x - g[0]).powi(2) + (y - g[1]).powi(2)) / POINT_WIDTH).exp())
                    .fold(f64::NEG_INFINITY, f64::max);
                let cost = POINT_ACTION_COST * (action[0].powi(2) + action[1].powi(2));
                (vec![x, y, vx, vy], goal - cost)
            }
            EnvKind::PendulumSwingUp => {
                let (th, w) = (state.physical[0], state.physical[1]);
                let u = PENDULUM_TORQUE * action[0];
                let angle = normalize_angle(th);
                let reward = -(angle * angle + 0.1 * w * w + 0.001 * u * u) / 10.0;
                let accel = 3.0 * PENDULUM_G / (2.0 * PENDULUM_L) * th.sin()
                    + 3.0 / (PENDULUM_M * PENDULUM_L * PENDULUM_L) * u;
                let w2 = (w + accel * PENDULUM_DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                let th2 = normalize_angle(th + w2 * PENDULUM_DT);
                (vec![th2, w2], reward)
            }
        };
        let next = EnvState {
            t: state.t + 1,
            physical,
        };
        let done = next.t >= spec.horizon;
        Ok(StepResult {
            next_obs: self.observe(&next),
            next,
            reward,
            done,
        })
    }
}

/// Uniform random actions; episodes restart when done.
pub fn rollout_uniform(env: EnvKind, seed: u64, n_steps: usize) -> Result<Vec<Transition>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adim = env.spec().action_dim;
    let mut state = env.reset(&mut rng);
    let mut out = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let action: Vec<f64> = (0..adim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let obs = env.observe(&state);
        let r = env.step(&state, &action)?;
        out.push(Transition {
            state: state.clone(),
            obs,
            action,
            reward: r.reward,
            next_obs: r.next_obs,
            done: r.done,
        });
        state = if r.done { env.reset(&mut rng) } else { r.next };
    }
    Ok(out)
}

/// A stochastic policy that reports `log pi(a|s)` of the action it takes.
pub trait Policy {
    fn sample(&mut self, obs: &[f64], rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)>;
}

/// Uniform on `[-1, 1]^|A|`; its log-ratio to the uniform prior is zero.
pub struct UniformPolicy {
    pub action_dim: usize,
}

impl Policy for UniformPolicy {
    fn sample(&mut self, _obs: &[f64], rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)> {
        let a = (0..self.action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Ok((a, -(self.action_dim as f64) * LN_2))
    }
}

/// Monte-Carlo soft return after taking `action` in `state`, then following
/// `policy` to the end of the episode. Later steps pay
/// `alpha * (log pi + |A| log 2)`. Returns the mean and its standard error.
#[allow(clippy::too_many_arguments)]
pub fn mc_return(
    env: EnvKind,
    policy: &mut dyn Policy,
    state: &EnvState,
    action: &[f64],
    gamma: f64,
    alpha: f64,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("mc_return needs at least one sample".into()));
    }
    let adim = env.spec().action_dim as f64;
    let first = env.step(state, action)?;
    let mut totals = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut total = first.reward;
        let mut discount = 1.0;
        let mut cur = first.clone();
        while !cur.done && gamma != 0.0 {
            discount *= gamma;
            let (a, logp) = policy.sample(&cur.next_obs, rng)?;
            let r = env.step(&cur.next, &a)?;
            total += discount * (r.reward - alpha * (logp + adim * LN_2));
            cur = r;
        }
        totals.push(total);
    }
    Ok(mean_and_se(&totals))
}

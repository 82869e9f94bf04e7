//! Native cart-pole and continuous mountain-car simulators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    CartPole,
    MountainCar,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::CartPole => "cartpole",
            EnvKind::MountainCar => "mountaincar",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::CartPole => 4,
            EnvKind::MountainCar => 2,
        }
    }

    /// Number of discrete actions, or the continuous action dimension.
    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::CartPole => 2,
            EnvKind::MountainCar => 1,
        }
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, EnvKind::CartPole)
    }

    pub fn default_max_steps(self) -> usize {
        match self {
            EnvKind::CartPole => 200,
            EnvKind::MountainCar => 999,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(f64),
}

impl Action {
    pub fn as_f64(self) -> f64 {
        match self {
            Action::Discrete(a) => a as f64,
            Action::Continuous(a) => a,
        }
    }
}

/// One stored step of experience. `obs` is already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: f64,
    pub reward: f64,
    pub done: bool,
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct EnvState {
    pub kind: EnvKind,
    pub obs: Vec<f64>,
    pub steps: usize,
    pub max_steps: usize,
    pub done: bool,
    /// True when the episode ended on the step cap rather than a terminal state.
    pub truncated: bool,
    pub episode_return: f64,
    pub rng: Rng,
}

const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const HALF_LENGTH: f64 = 0.5;
const FORCE_MAG: f64 = 10.0;
const TAU: f64 = 0.02;
const X_LIMIT: f64 = 2.4;
const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;

const MC_MIN_POS: f64 = -1.2;
const MC_MAX_POS: f64 = 0.6;
const MC_MAX_SPEED: f64 = 0.07;
const MC_GOAL: f64 = 0.45;
const MC_POWER: f64 = 0.0015;

pub fn env_reset(kind: EnvKind, rng: Rng) -> EnvState {
    env_reset_capped(kind, rng, kind.default_max_steps())
}

pub fn env_reset_capped(kind: EnvKind, mut rng: Rng, max_steps: usize) -> EnvState {
    let obs = match kind {
        EnvKind::CartPole => (0..4).map(|_| rng.uniform_open(-0.05, 0.05)).collect(),
        EnvKind::MountainCar => vec![rng.uniform_open(-0.6, -0.4), 0.0],
    };
    EnvState {
        kind,
        obs,
        steps: 0,
        max_steps,
        done: false,
        truncated: false,
        episode_return: 0.0,
        rng,
    }
}

/// Advances one step; returns `(reward, done)`.
pub fn env_step(state: &mut EnvState, action: Action) -> Result<(f64, bool)> {
    let env = state.kind.name();
    if state.done {
        return Err(Error::Env {
            env,
            msg: "step called after the episode ended".into(),
        });
    }
    let (reward, terminal) = match (state.kind, action) {
        (EnvKind::CartPole, Action::Discrete(a)) if a < 2 => cartpole_step(&mut state.obs, a),
        (EnvKind::MountainCar, Action::Continuous(a)) if a.is_finite() => mountaincar_step(&mut state.obs, a),
        (EnvKind::MountainCar, Action::Continuous(a)) => {
            return Err(Error::Env {
                env,
                msg: format!("non-finite action {a}"),
            })
        }
        (_, a) => {
            return Err(Error::Env {
                env,
                msg: format!("invalid action {a:?}"),
            })
        }
    };
    state.steps += 1;
    state.episode_return += reward;
    state.truncated = !terminal && state.steps >= state.max_steps;
    state.done = terminal || state.truncated;
    Ok((reward, state.done))
}

fn cartpole_step(s: &mut [f64], action: usize) -> (f64, bool) {
    let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
    let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
    let total = CART_MASS + POLE_MASS;
    let pml = POLE_MASS * HALF_LENGTH;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pml * theta_dot * theta_dot * sin) / total;
    let theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;
    s[0] = x + TAU * x_dot;
    s[1] = x_dot + TAU * x_acc;
    s[2] = theta + TAU * theta_dot;
    s[3] = theta_dot + TAU * theta_acc;
    let terminal = s[0].abs() > X_LIMIT || s[2].abs() > THETA_LIMIT;
    (1.0, terminal)
}

fn mountaincar_step(s: &mut [f64], action: f64) -> (f64, bool) {
    let force = action.clamp(-1.0, 1.0);
    let mut v = s[1] + force * MC_POWER - 0.0025 * (3.0 * s[0]).cos();
    v = v.clamp(-MC_MAX_SPEED, MC_MAX_SPEED);
    let mut p = (s[0] + v).clamp(MC_MIN_POS, MC_MAX_POS);
    if p == MC_MIN_POS && v < 0.0 {
        v = 0.0;
    }
    if p > MC_MAX_POS {
        p = MC_MAX_POS;
    }
    s[0] = p;
    s[1] = v;
    let terminal = p >= MC_GOAL;
    let mut reward = -0.1 * action * action;
    if terminal {
        reward += 100.0;
    }
    (reward, terminal)
}

/// Default bang-bang magnitude for the mountain-car expert. Full throttle
/// pays enough control cost to land just under a return of 90.
pub const MOUNTAINCAR_EXPERT_GAIN: f64 = 0.6;

/// Hand-written controllers on raw observations.
pub fn scripted_expert(kind: EnvKind, obs: &[f64]) -> Action {
    scripted_expert_with_gain(kind, obs, MOUNTAINCAR_EXPERT_GAIN)
}

pub fn scripted_expert_with_gain(kind: EnvKind, obs: &[f64], gain: f64) -> Action {
    match kind {
        EnvKind::CartPole => Action::Discrete(usize::from(obs[2] + 0.5 * obs[3] > 0.0)),
        EnvKind::MountainCar => Action::Continuous(if obs[1] < 0.0 { -gain } else { gain }),
    }
}

/// Runs one episode with `policy` on raw observations and returns its return.
pub fn run_episode(kind: EnvKind, rng: Rng, mut policy: impl FnMut(&[f64]) -> Action) -> Result<f64> {
    let mut st = env_reset(kind, rng);
    while !st.done {
        let a = policy(&st.obs);
        env_step(&mut st, a)?;
    }
    Ok(st.episode_return)
}

//! Deterministic continuous-control tasks with known rewards.
//!
//! Both tasks integrate `velocity += 0.1·action` (speed clipped to 1) and
//! then `position += 0.1·velocity`. Rewards are computed on the post-step
//! state. Episodes always run to `max_episode_steps`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Rng;

const DT: f64 = 0.1;
const MAX_SPEED: f64 = 1.0;
const LINE_TARGET: f64 = 1.0;
const LINE_ACTION_COST: f64 = 0.01;
const KP: f64 = 1.0;
const KD: f64 = 0.5;

/// Stream reserved for initial-state sampling in [`EnvSpec::reset`].
const RESET_STREAM: u64 = 0x5e5e7;

const CALIBRATION_JSON: &str = include_str!("../calibration.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "pointmass2d")]
    PointMass2D,
    #[serde(rename = "lineworld")]
    LineWorld,
}

impl EnvKind {
    pub const ALL: [EnvKind; 2] = [EnvKind::PointMass2D, EnvKind::LineWorld];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointMass2D => "pointmass2d",
            EnvKind::LineWorld => "lineworld",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown environment {name:?} (expected one of: pointmass2d, lineworld)"
                ))
            })
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
    /// Mean return of a uniform-random policy.
    pub random_score: f64,
    /// Mean return of the noiseless expert controller.
    pub expert_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub features: Vec<f64>,
    /// Steps taken in the current episode; not part of the observation.
    pub elapsed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub values: Vec<f64>,
}

impl Action {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: State,
    pub reward: f64,
    pub done: bool,
}

/// One row of `calibration.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub env: EnvKind,
    pub random_score: f64,
    pub expert_score: f64,
    pub episodes: usize,
    pub seed: u64,
}

/// The checked-in calibration constants.
pub fn calibration_table() -> Vec<CalibrationEntry> {
    serde_json::from_str(CALIBRATION_JSON).expect("calibration.json is valid")
}

/// Looks up an environment by registry name.
pub fn make_env(name: &str) -> Result<EnvSpec> {
    Ok(EnvSpec::new(EnvKind::from_name(name)?))
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        let entry = calibration_table()
            .into_iter()
            .find(|e| e.env == kind)
            .expect("every environment is calibrated");
        let mut spec = Self::uncalibrated(kind);
        spec.random_score = entry.random_score;
        spec.expert_score = entry.expert_score;
        spec
    }

    /// Environment with zeroed score constants, used when producing them.
    pub fn uncalibrated(kind: EnvKind) -> Self {
        let (state_dim, action_dim, max_episode_steps) = match kind {
            EnvKind::PointMass2D => (6, 2, 200),
            EnvKind::LineWorld => (2, 1, 100),
        };
        Self {
            kind,
            state_dim,
            action_dim,
            action_low: vec![-1.0; action_dim],
            action_high: vec![1.0; action_dim],
            max_episode_steps,
            random_score: 0.0,
            expert_score: 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn normalized_score(&self, episodic_return: f64) -> f64 {
        100.0 * (episodic_return - self.random_score) / (self.expert_score - self.random_score)
    }

    /// Deterministic initial state for `seed`.
    pub fn reset(&self, seed: u64) -> State {
        let mut rng = Rng::with_stream(seed, RESET_STREAM);
        let features = match self.kind {
            EnvKind::PointMass2D => {
                let px = rng.uniform(-1.0, 1.0);
                let py = rng.uniform(-1.0, 1.0);
                let gx = rng.uniform(-1.0, 1.0);
                let gy = rng.uniform(-1.0, 1.0);
                vec![px, py, 0.0, 0.0, gx - px, gy - py]
            }
            EnvKind::LineWorld => vec![rng.uniform(-1.0, 0.0), 0.0],
        };
        State {
            features,
            elapsed: 0,
        }
    }

    fn check_state(&self, state: &State) -> Result<()> {
        if state.features.len() != self.state_dim {
            return Err(Error::Shape(format!(
                "{} state has {} features, expected {}",
                self.name(),
                state.features.len(),
                self.state_dim
            )));
        }
        Ok(())
    }

    pub fn check_action(&self, action: &Action) -> Result<()> {
        if action.values.len() != self.action_dim {
            return Err(Error::Shape(format!(
                "{} action has {} components, expected {}",
                self.name(),
                action.values.len(),
                self.action_dim
            )));
        }
        for (i, &a) in action.values.iter().enumerate() {
            if !(a >= self.action_low[i] && a <= self.action_high[i]) {
                return Err(Error::Precondition(format!(
                    "action component {i} = {a} outside [{}, {}]",
                    self.action_low[i], self.action_high[i]
                )));
            }
        }
        Ok(())
    }

    /// Clips every component into the action box.
    pub fn clip_action(&self, values: &mut [f64]) {
        for (i, v) in values.iter_mut().enumerate() {
            *v = v.clamp(self.action_low[i], self.action_high[i]);
        }
    }

    pub fn step(&self, state: &State, action: &Action) -> Result<StepOutcome> {
        self.check_state(state)?;
        self.check_action(action)?;
        if state.elapsed >= self.max_episode_steps {
            return Err(Error::Precondition(format!(
                "episode already finished after {} steps",
                state.elapsed
            )));
        }
        let f = &state.features;
        let a = &action.values;
        let features = match self.kind {
            EnvKind::PointMass2D => {
                let mut v = [f[2] + DT * a[0], f[3] + DT * a[1]];
                let speed = v[0].hypot(v[1]);
                if speed > MAX_SPEED {
                    v = [v[0] * MAX_SPEED / speed, v[1] * MAX_SPEED / speed];
                }
                let p = [f[0] + DT * v[0], f[1] + DT * v[1]];
                let goal = [f[0] + f[4], f[1] + f[5]];
                vec![p[0], p[1], v[0], v[1], goal[0] - p[0], goal[1] - p[1]]
            }
            EnvKind::LineWorld => {
                let v = (f[1] + DT * a[0]).clamp(-MAX_SPEED, MAX_SPEED);
                vec![f[0] + DT * v, v]
            }
        };
        let next_state = State {
            features,
            elapsed: state.elapsed + 1,
        };
        if next_state.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("environment produced a non-finite state".into()));
        }
        let reward = self.ground_truth_reward(state, action, &next_state);
        Ok(StepOutcome {
            done: next_state.elapsed >= self.max_episode_steps,
            next_state,
            reward,
        })
    }

    /// The task's true per-step reward. Pure; depends on the action and the
    /// post-step state.
    pub fn ground_truth_reward(&self, _state: &State, action: &Action, next_state: &State) -> f64 {
        self.reward_from_features(&action.values, &next_state.features)
    }

    /// [`EnvSpec::ground_truth_reward`] on raw feature slices.
    pub fn reward_from_features(&self, action: &[f64], next_features: &[f64]) -> f64 {
        match self.kind {
            EnvKind::PointMass2D => -next_features[4].hypot(next_features[5]),
            EnvKind::LineWorld => {
                -(next_features[0] - LINE_TARGET).abs() - LINE_ACTION_COST * action[0] * action[0]
            }
        }
    }

    /// PD controller toward the goal plus Gaussian noise, clipped to bounds.
    pub fn expert_action(&self, state: &State, noise_scale: f64, rng: &mut Rng) -> Action {
        let f = &state.features;
        let mut values = match self.kind {
            EnvKind::PointMass2D => vec![KP * f[4] - KD * f[2], KP * f[5] - KD * f[3]],
            EnvKind::LineWorld => vec![KP * (LINE_TARGET - f[0]) - KD * f[1]],
        };
        if noise_scale > 0.0 {
            for v in &mut values {
                *v += noise_scale * rng.normal();
            }
        }
        self.clip_action(&mut values);
        Action { values }
    }

    pub fn random_action(&self, rng: &mut Rng) -> Action {
        Action {
            values: (0..self.action_dim)
                .map(|i| rng.uniform(self.action_low[i], self.action_high[i]))
                .collect(),
        }
    }

    /// Projection of a state to 2D for display: the position in the plane,
    /// or (step, position) on the line.
    pub fn project_2d(&self, features: &[f64], step: usize) -> [f64; 2] {
        match self.kind {
            EnvKind::PointMass2D => [features[0], features[1]],
            EnvKind::LineWorld => [step as f64, features[0]],
        }
    }
}

/// Anything that picks actions in an environment.
pub trait Controller {
    fn act(&self, env: &EnvSpec, state: &State, rng: &mut Rng) -> Result<Action>;
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertController {
    pub noise_scale: f64,
}

impl Controller for ExpertController {
    fn act(&self, env: &EnvSpec, state: &State, rng: &mut Rng) -> Result<Action> {
        Ok(env.expert_action(state, self.noise_scale, rng))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RandomController;

impl Controller for RandomController {
    fn act(&self, env: &EnvSpec, _state: &State, rng: &mut Rng) -> Result<Action> {
        Ok(env.random_action(rng))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next_state: State,
}

/// Runs one full episode from `reset(reset_seed)`.
pub fn rollout(
    env: &EnvSpec,
    controller: &dyn Controller,
    reset_seed: u64,
    rng: &mut Rng,
) -> Result<Vec<StepRecord>> {
    let mut state = env.reset(reset_seed);
    let mut steps = Vec::with_capacity(env.max_episode_steps);
    loop {
        let action = controller.act(env, &state, rng)?;
        let outcome = env.step(&state, &action)?;
        let done = outcome.done;
        steps.push(StepRecord {
            state: std::mem::replace(&mut state, outcome.next_state.clone()),
            action,
            reward: outcome.reward,
            next_state: outcome.next_state,
        });
        if done {
            return Ok(steps);
        }
    }
}

/// Seed of the `index`-th episode in a run keyed by `base`.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    Rng::with_stream(base, index).split(0).seed()
}

/// Undiscounted returns of `episodes` rollouts with seeds derived from `seed`.
pub fn episode_returns(
    env: &EnvSpec,
    controller: &dyn Controller,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..episodes as u64)
        .map(|i| {
            let mut rng = Rng::with_stream(seed, i).split(1);
            let steps = rollout(env, controller, episode_seed(seed, i), &mut rng)?;
            Ok(steps.iter().map(|s| s.reward).sum())
        })
        .collect()
}

/// Measures the random and expert reference returns for `kind`.
pub fn calibrate(kind: EnvKind, episodes: usize, seed: u64) -> Result<CalibrationEntry> {
    let env = EnvSpec::uncalibrated(kind);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let random_score = mean(episode_returns(&env, &RandomController, episodes, seed)?);
    let expert_score = mean(episode_returns(
        &env,
        &ExpertController { noise_scale: 0.0 },
        episodes,
        seed,
    )?);
    Ok(CalibrationEntry {
        env: kind,
        random_score,
        expert_score,
        episodes,
        seed,
    })
}

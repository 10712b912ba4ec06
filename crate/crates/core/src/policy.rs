//! TD3+BC policy learning on a labeled offline dataset, the behavioral
//! cloning baseline, reward substitution baselines, and evaluation.
//!
//! The actor maximizes `λ·Q1(s, π(s)) − (π(s) − a)²` where
//! `λ = α / mean|Q1(s, π(s))|` is recomputed on every batch and treated as a
//! constant in the gradient. Critics regress on the clipped double-Q target
//! with target-policy smoothing. Episodes have a fixed horizon, so the target
//! is never masked.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_norm_stats, normalized_states, NormStats, OfflineDataset};
use crate::envs::{episode_returns, Action, Controller, EnvKind, EnvSpec, State};
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, Gradients, Mlp, Rng};
use crate::reward_model::csv_err;

pub const AGENT_VERSION: u32 = 1;
const LAMBDA_FLOOR: f64 = 1e-8;

const ACTOR_INIT_STREAM: u64 = 1;
const CRITIC1_INIT_STREAM: u64 = 2;
const CRITIC2_INIT_STREAM: u64 = 3;
const BATCH_STREAM: u64 = 4;
const NOISE_STREAM: u64 = 5;
const EVAL_STREAM: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: usize,
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
    pub batch_size: usize,
    pub updates: usize,
    pub actor_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub hidden_sizes: Vec<usize>,
    pub seed: u64,
    pub log_every: usize,
    /// Evaluate every this many updates during training; 0 disables.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            alpha: 2.5,
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            target_noise_std: 0.2,
            target_noise_clip: 0.5,
            batch_size: 256,
            updates: 5_000,
            actor_learning_rate: 3e-4,
            critic_learning_rate: 3e-4,
            hidden_sizes: vec![32, 32],
            seed: 0,
            log_every: 1_000,
            eval_every: 0,
            eval_episodes: 10,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.policy_delay == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "policy_delay, batch_size and log_every must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// `α / mean|Q|`, with the denominator floored at 1e-8.
pub fn lambda_norm(q_values: &[f64], alpha: f64) -> Result<f64> {
    if q_values.is_empty() {
        return Err(Error::Precondition("lambda needs at least one Q value".into()));
    }
    let mean_abs = q_values.iter().map(|q| q.abs()).sum::<f64>() / q_values.len() as f64;
    Ok(alpha / mean_abs.max(LAMBDA_FLOOR))
}

/// Deterministic policy: normalized state → tanh output scaled into the
/// action box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub env: EnvKind,
    pub net: Mlp,
    pub norm_stats: NormStats,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl Actor {
    pub fn init(env: &EnvSpec, norm_stats: NormStats, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        if norm_stats.dim() != env.state_dim {
            return Err(Error::Shape(format!(
                "normalization has width {}, {} states have {}",
                norm_stats.dim(),
                env.name(),
                env.state_dim
            )));
        }
        let sizes = layer_sizes(env.state_dim, hidden, env.action_dim);
        Ok(Self {
            env: env.kind,
            net: Mlp::init(&sizes, Activation::Relu, Activation::Tanh, rng)?,
            norm_stats,
            action_low: env.action_low.clone(),
            action_high: env.action_high.clone(),
        })
    }

    fn half_range(&self) -> Array1<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| 0.5 * (h - l))
            .collect()
    }

    fn center(&self) -> Array1<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| 0.5 * (h + l))
            .collect()
    }

    fn scale(&self, squashed: &Array2<f64>) -> Array2<f64> {
        squashed * &self.half_range() + &self.center()
    }

    /// Actions for rows of normalized states.
    pub fn actions(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.scale(&self.net.forward(states)?))
    }

    /// Action for one raw (unnormalized) state.
    pub fn act_raw(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.norm_stats.dim() {
            return Err(Error::Shape(format!(
                "state has {} features, policy expects {}",
                features.len(),
                self.norm_stats.dim()
            )));
        }
        let x = Array2::from_shape_vec((1, features.len()), self.norm_stats.normalize(features))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut a = self.actions(x.view())?.row(0).to_vec();
        for (i, v) in a.iter_mut().enumerate() {
            *v = v.clamp(self.action_low[i], self.action_high[i]);
        }
        Ok(a)
    }
}

impl Controller for Actor {
    fn act(&self, env: &EnvSpec, state: &State, _rng: &mut Rng) -> Result<Action> {
        if env.kind != self.env {
            return Err(Error::Config(format!(
                "policy trained on {} cannot act in {}",
                self.env, env.kind
            )));
        }
        Ok(Action::new(self.act_raw(&state.features)?))
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

/// Actor, twin critics and their target copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub version: u32,
    pub config: PolicyConfig,
    pub actor: Actor,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target_actor: Mlp,
    pub target_critic1: Mlp,
    pub target_critic2: Mlp,
}

impl Agent {
    pub fn init(env: &EnvSpec, norm_stats: NormStats, config: &PolicyConfig) -> Result<Self> {
        let root = Rng::new(config.seed);
        let actor = Actor::init(env, norm_stats, &config.hidden_sizes, &mut root.split(ACTOR_INIT_STREAM))?;
        let sizes = layer_sizes(env.state_dim + env.action_dim, &config.hidden_sizes, 1);
        let critic = |stream| {
            Mlp::init(
                &sizes,
                Activation::Relu,
                Activation::Identity,
                &mut root.split(stream),
            )
        };
        let critic1 = critic(CRITIC1_INIT_STREAM)?;
        let critic2 = critic(CRITIC2_INIT_STREAM)?;
        Ok(Self {
            version: AGENT_VERSION,
            config: config.clone(),
            target_actor: actor.net.clone(),
            target_critic1: critic1.clone(),
            target_critic2: critic2.clone(),
            actor,
            critic1,
            critic2,
        })
    }

    fn target_actions(&self, next_states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.actor.scale(&self.target_actor.forward(next_states)?))
    }
}

impl Controller for Agent {
    fn act(&self, env: &EnvSpec, state: &State, rng: &mut Rng) -> Result<Action> {
        self.actor.act(env, state, rng)
    }
}

/// A dataset as normalized matrices ready for minibatch sampling.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Option<Array1<f64>>,
    pub next_states: Array2<f64>,
}

impl TrainingData {
    pub fn new(dataset: &OfflineDataset, stats: &NormStats) -> Result<Self> {
        let action_dim = dataset.spec().action_dim;
        let actions = Array2::from_shape_vec(
            (dataset.len(), action_dim),
            dataset.transitions().iter().flat_map(|t| t.action.iter().copied()).collect(),
        )
        .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            states: normalized_states(dataset, stats, false)?,
            actions,
            rewards: dataset.rewards().map(Array1::from),
            next_states: normalized_states(dataset, stats, true)?,
        })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    /// `size` rows drawn uniformly with replacement.
    pub fn sample(&self, size: usize, rng: &mut Rng) -> Batch {
        let idx: Vec<usize> = (0..size).map(|_| rng.below(self.len())).collect();
        Batch {
            states: self.states.select(Axis(0), &idx),
            actions: self.actions.select(Axis(0), &idx),
            rewards: self.rewards.as_ref().map(|r| r.select(Axis(0), &idx)),
            next_states: self.next_states.select(Axis(0), &idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Option<Array1<f64>>,
    pub next_states: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

fn state_action(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
    concatenate(Axis(1), &[states, actions]).map_err(|e| Error::Shape(e.to_string()))
}

/// `r + γ·min(Q̂1, Q̂2)(s', a')` with `a'` the smoothed target action.
pub fn critic_targets(agent: &Agent, batch: &Batch, config: &PolicyConfig, rng: &mut Rng) -> Result<Array1<f64>> {
    let rewards = batch
        .rewards
        .as_ref()
        .ok_or_else(|| Error::Unlabeled("critic targets".into()))?;
    let half = agent.actor.half_range();
    let mut next_actions = agent.target_actions(batch.next_states.view())?;
    for mut row in next_actions.rows_mut() {
        for (j, a) in row.iter_mut().enumerate() {
            let noise = if config.target_noise_std > 0.0 {
                (rng.normal() * config.target_noise_std)
                    .clamp(-config.target_noise_clip, config.target_noise_clip)
            } else {
                0.0
            };
            *a = (*a + noise * half[j]).clamp(agent.actor.action_low[j], agent.actor.action_high[j]);
        }
    }
    let x = state_action(batch.next_states.view(), next_actions.view())?;
    let q1 = agent.target_critic1.forward(x.view())?;
    let q2 = agent.target_critic2.forward(x.view())?;
    Ok(Array1::from_shape_fn(batch.len(), |i| {
        rewards[i] + config.gamma * q1[[i, 0]].min(q2[[i, 0]])
    }))
}

/// Mean squared error of `critic(inputs)` against `targets`, with gradient.
pub fn critic_mse(critic: &Mlp, inputs: ArrayView2<f64>, targets: &Array1<f64>) -> Result<(f64, Gradients)> {
    let trace = critic.forward_trace(inputs)?;
    let q = trace.output().column(0);
    if q.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} critic outputs for {} targets",
            q.len(),
            targets.len()
        )));
    }
    let n = q.len() as f64;
    let err = &q - targets;
    let loss = err.mapv(|e| e * e).sum() / n;
    let upstream = (err * (2.0 / n)).insert_axis(Axis(1));
    let back = critic.backward(&trace, upstream.view())?;
    Ok((loss, back.params))
}

#[derive(Debug, Clone)]
pub struct ActorObjective {
    pub loss: f64,
    pub lambda: f64,
    pub gradients: Gradients,
}

/// `−λ·mean Q(s, π(s)) + mean (π(s) − a)²` and its gradient in the actor's
/// parameters. `lambda` overrides the per-batch normalizer when given.
pub fn actor_objective(
    actor: &Actor,
    critic: &Mlp,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    alpha: f64,
    lambda: Option<f64>,
) -> Result<ActorObjective> {
    let trace = actor.net.forward_trace(states)?;
    let policy_actions = actor.scale(trace.output());
    if policy_actions.dim() != actions.dim() {
        return Err(Error::Shape(format!(
            "policy actions {:?} vs dataset actions {:?}",
            policy_actions.dim(),
            actions.dim()
        )));
    }
    let batch = states.nrows() as f64;
    let elements = policy_actions.len() as f64;
    let diff = &policy_actions - &actions;
    let bc_loss = diff.mapv(|d| d * d).sum() / elements;
    let mut d_actions = diff * (2.0 / elements);

    let x = state_action(states, policy_actions.view())?;
    let critic_trace = critic.forward_trace(x.view())?;
    let q: Vec<f64> = critic_trace.output().column(0).to_vec();
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("critic produced a non-finite value".into()));
    }
    let lambda = match lambda {
        Some(l) => l,
        None => lambda_norm(&q, alpha)?,
    };
    let q_mean = q.iter().sum::<f64>() / batch;
    if lambda != 0.0 {
        let upstream = Array2::from_elem((states.nrows(), 1), -lambda / batch);
        let back = critic.backward(&critic_trace, upstream.view())?;
        d_actions += &back.input.slice(s![.., states.ncols()..]);
    }
    let d_squashed = d_actions * &actor.half_range();
    let back = actor.net.backward(&trace, d_squashed.view())?;
    Ok(ActorObjective {
        loss: -lambda * q_mean + bc_loss,
        lambda,
        gradients: back.params,
    })
}

/// Behavioral cloning loss `mean (π(s) − a)²` and its gradient.
pub fn bc_objective(actor: &Actor, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<(f64, Gradients)> {
    let trace = actor.net.forward_trace(states)?;
    let diff = actor.scale(trace.output()) - actions;
    let elements = diff.len() as f64;
    let loss = diff.mapv(|d| d * d).sum() / elements;
    let upstream = diff * (2.0 / elements) * &actor.half_range();
    let back = actor.net.backward(&trace, upstream.view())?;
    Ok((loss, back.params))
}

/// An agent together with its optimizer state.
#[derive(Debug, Clone)]
pub struct Td3BcLearner {
    pub agent: Agent,
    actor_opt: AdamState,
    critic1_opt: AdamState,
    critic2_opt: AdamState,
    noise_rng: Rng,
}

impl Td3BcLearner {
    pub fn new(agent: Agent) -> Self {
        let config = &agent.config;
        let root = Rng::new(config.seed);
        Self {
            actor_opt: AdamState::new(&agent.actor.net, AdamConfig::with_learning_rate(config.actor_learning_rate)),
            critic1_opt: AdamState::new(&agent.critic1, AdamConfig::with_learning_rate(config.critic_learning_rate)),
            critic2_opt: AdamState::new(&agent.critic2, AdamConfig::with_learning_rate(config.critic_learning_rate)),
            noise_rng: root.split(NOISE_STREAM),
            agent,
        }
    }

    /// One Adam step for both critics on shared targets. Returns the summed
    /// loss.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64> {
        let config = self.agent.config.clone();
        let targets = critic_targets(&self.agent, batch, &config, &mut self.noise_rng)?;
        let x = state_action(batch.states.view(), batch.actions.view())?;
        let (l1, g1) = critic_mse(&self.agent.critic1, x.view(), &targets)?;
        let (l2, g2) = critic_mse(&self.agent.critic2, x.view(), &targets)?;
        let loss = l1 + l2;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("critic loss is {loss}")));
        }
        adam_step(&mut self.agent.critic1, &g1, &mut self.critic1_opt)?;
        adam_step(&mut self.agent.critic2, &g2, &mut self.critic2_opt)?;
        Ok(loss)
    }

    /// One actor step followed by soft updates of all three targets.
    /// Returns `(loss, λ)`.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        self.actor_update_with(batch, None)
    }

    /// [`Self::actor_update`] with the normalizer fixed to `lambda`.
    pub fn actor_update_with(&mut self, batch: &Batch, lambda: Option<f64>) -> Result<(f64, f64)> {
        let agent = &mut self.agent;
        let objective = actor_objective(
            &agent.actor,
            &agent.critic1,
            batch.states.view(),
            batch.actions.view(),
            agent.config.alpha,
            lambda,
        )?;
        if !objective.loss.is_finite() {
            return Err(Error::Divergence(format!("actor loss is {}", objective.loss)));
        }
        adam_step(&mut agent.actor.net, &objective.gradients, &mut self.actor_opt)?;
        let tau = agent.config.tau;
        agent.target_actor.soft_update_from(&agent.actor.net, tau)?;
        agent.target_critic1.soft_update_from(&agent.critic1, tau)?;
        agent.target_critic2.soft_update_from(&agent.critic2, tau)?;
        Ok((objective.loss, objective.lambda))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogRow {
    pub update: usize,
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub lambda: Option<f64>,
    pub eval_score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyTrainingLog {
    pub rows: Vec<PolicyLogRow>,
}

impl PolicyTrainingLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["update", "critic_loss", "actor_loss", "lambda", "eval_score"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.update.to_string(),
                r.critic_loss.to_string(),
                opt(r.actor_loss),
                opt(r.lambda),
                opt(r.eval_score),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn dataset_stats(dataset: &OfflineDataset) -> Result<NormStats> {
    match dataset.norm_stats() {
        Some(s) => Ok(s.clone()),
        None => compute_norm_stats(dataset),
    }
}

/// Runs TD3+BC for `config.updates` critic updates.
pub fn train_policy(dataset: &OfflineDataset, config: &PolicyConfig) -> Result<(Agent, PolicyTrainingLog)> {
    config.validate()?;
    if !dataset.labeled() {
        return Err(Error::Unlabeled(
            "policy training; label it with a reward model or with ground-truth rewards first".into(),
        ));
    }
    let env = dataset.spec();
    let stats = dataset_stats(dataset)?;
    let data = TrainingData::new(dataset, &stats)?;
    let mut learner = Td3BcLearner::new(Agent::init(&env, stats, config)?);
    let mut batch_rng = Rng::new(config.seed).split(BATCH_STREAM);
    let mut log = PolicyTrainingLog::default();
    let (mut actor_loss, mut lambda) = (None, None);

    for update in 1..=config.updates {
        let batch = data.sample(config.batch_size, &mut batch_rng);
        let critic_loss = learner.critic_update(&batch)?;
        if update % config.policy_delay == 0 {
            let (l, lam) = learner.actor_update(&batch)?;
            actor_loss = Some(l);
            lambda = Some(lam);
        }
        let evaluating = config.eval_every > 0 && update % config.eval_every == 0;
        if update % config.log_every == 0 || update == config.updates || evaluating {
            let eval_score = if evaluating {
                let seed = Rng::new(config.seed).split(EVAL_STREAM).seed();
                Some(evaluate(&learner.agent, &env, config.eval_episodes, seed)?.normalized_score)
            } else {
                None
            };
            log.rows.push(PolicyLogRow {
                update,
                critic_loss,
                actor_loss,
                lambda,
                eval_score,
            });
        }
    }
    Ok((learner.agent, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcLogRow {
    pub update: usize,
    pub loss: f64,
}

/// Regresses dataset actions on states with an actor-only network. Rewards
/// are ignored.
pub fn train_bc(dataset: &OfflineDataset, config: &PolicyConfig) -> Result<(Actor, Vec<BcLogRow>)> {
    config.validate()?;
    let env = dataset.spec();
    let stats = dataset_stats(dataset)?;
    let data = TrainingData::new(dataset, &stats)?;
    let root = Rng::new(config.seed);
    let mut actor = Actor::init(&env, stats, &config.hidden_sizes, &mut root.split(ACTOR_INIT_STREAM))?;
    let mut opt = AdamState::new(&actor.net, AdamConfig::with_learning_rate(config.actor_learning_rate));
    let mut batch_rng = root.split(BATCH_STREAM);
    let mut log = Vec::new();
    for update in 1..=config.updates {
        let batch = data.sample(config.batch_size, &mut batch_rng);
        let (loss, grads) = bc_objective(&actor, batch.states.view(), batch.actions.view())?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("behavioral cloning loss is {loss}")));
        }
        adam_step(&mut actor.net, &grads, &mut opt)?;
        if update % config.log_every == 0 || update == config.updates {
            log.push(BcLogRow { update, loss });
        }
    }
    Ok((actor, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSubstitution {
    ConstantZero,
    UniformRandom,
}

/// Replaces every reward with 0 or with an independent U(−1, 1) draw.
pub fn substitute_rewards(dataset: &OfflineDataset, mode: RewardSubstitution, seed: u64) -> Result<OfflineDataset> {
    match mode {
        RewardSubstitution::ConstantZero => dataset.map_rewards(|_, _| 0.0),
        RewardSubstitution::UniformRandom => {
            let mut rng = Rng::new(seed);
            dataset.map_rewards(|_, _| rng.uniform(-1.0, 1.0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_episode_returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub normalized_score: f64,
}

/// Ground-truth returns of `episodes` deterministic rollouts.
pub fn evaluate(policy: &dyn Controller, env: &EnvSpec, episodes: usize, seed: u64) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::Precondition("evaluation needs at least one episode".into()));
    }
    let returns = episode_returns(env, policy, episodes, seed)?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalResult {
        normalized_score: env.normalized_score(mean),
        per_episode_returns: returns,
        mean,
        std,
    })
}

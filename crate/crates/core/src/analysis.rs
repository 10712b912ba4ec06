//! Reward and value-function diagnostics: correlation between critic values
//! and empirical discounted returns, the Goodness of the critic at expert
//! actions, and the affine reward-transformation experiment.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{hex_digest, OfflineDataset, Trajectory};
use crate::envs::Controller;
use crate::error::{Error, Result};
use crate::nn::Rng;
use crate::policy::{evaluate, Agent};

/// Minimum distance between a random action and the expert action.
pub const EXPERT_EXCLUSION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub gamma: f64,
    /// Random actions per state for Goodness.
    pub goodness_actions: usize,
    /// Expert states sampled for Goodness.
    pub n_states: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            goodness_actions: 32,
            n_states: 1_000,
            eval_episodes: 100,
            seed: 0,
        }
    }
}

/// Anything that scores state-action pairs. States are raw environment
/// features.
pub trait ActionValue {
    fn action_values(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Vec<f64>>;
}

impl ActionValue for Agent {
    fn action_values(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Vec<f64>> {
        let mut x = states.clone();
        self.actor.norm_stats.normalize_rows(&mut x);
        let input = ndarray::concatenate(ndarray::Axis(1), &[x.view(), actions.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.critic1.forward(input.view())?.column(0).to_vec())
    }
}

/// A policy with a critic, as needed for a full report.
pub trait AnalyzedAgent: Controller + ActionValue {
    /// Discount the critic was trained with.
    fn training_gamma(&self) -> f64;
    /// Stable content hash identifying the agent.
    fn fingerprint(&self) -> Result<String>;
}

impl AnalyzedAgent for Agent {
    fn training_gamma(&self) -> f64 {
        self.config.gamma
    }

    fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        Ok(hex_digest(h))
    }
}

/// `G_t = r_t + γ·G_{t+1}` along the trajectory.
pub fn discounted_return_series(trajectory: &Trajectory, gamma: f64) -> Result<Vec<f64>> {
    let rewards = trajectory
        .rewards()
        .ok_or_else(|| Error::Unlabeled(format!("discounted returns of episode {}", trajectory.episode_id)))?;
    let mut out = vec![0.0; rewards.len()];
    let mut tail = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        tail = r + gamma * tail;
        out[t] = tail;
    }
    Ok(out)
}

/// Sample Pearson correlation. Either side constant is an error, not 0.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} values against {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Precondition("correlation needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateCorrelation(format!(
            "{} side is constant",
            if sxx == 0.0 { "first" } else { "second" }
        )));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Raw states and actions of a dataset, undoing stored normalization.
fn raw_rows(transitions: &[crate::dataset::Transition], dataset: &OfflineDataset) -> (Array2<f64>, Array2<f64>) {
    let spec = dataset.spec();
    let mut states = Array2::zeros((transitions.len(), spec.state_dim));
    let mut actions = Array2::zeros((transitions.len(), spec.action_dim));
    for (i, t) in transitions.iter().enumerate() {
        for (j, &v) in t.state.iter().enumerate() {
            states[[i, j]] = match dataset.norm_stats() {
                Some(s) => v * s.std[j] + s.mean[j],
                None => v,
            };
        }
        for (j, &v) in t.action.iter().enumerate() {
            actions[[i, j]] = v;
        }
    }
    (states, actions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    /// Mean of per-trajectory correlations; absent when every trajectory
    /// was degenerate.
    pub mean: Option<f64>,
    pub trajectories: usize,
    pub skipped: usize,
}

/// Per trajectory, Pearson between `Q(s_t, a_t)` and the discounted return
/// of the dataset's labels; averaged over trajectories.
pub fn value_return_correlation(
    critic: &dyn ActionValue,
    dataset: &OfflineDataset,
    config: &AnalysisConfig,
) -> Result<CorrelationSummary> {
    dataset.require_labeled("value-return correlation")?;
    let trajectories = dataset.split_trajectories()?;
    let mut values = Vec::with_capacity(trajectories.len());
    let mut skipped = 0;
    for traj in &trajectories {
        let returns = discounted_return_series(traj, config.gamma)?;
        let (s, a) = raw_rows(&traj.transitions, dataset);
        let q = critic.action_values(&s, &a)?;
        match pearson_correlation(&q, &returns) {
            Ok(r) => values.push(r),
            Err(Error::DegenerateCorrelation(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(CorrelationSummary {
        mean: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
        trajectories: trajectories.len(),
        skipped,
    })
}

/// Fraction of random actions valued strictly below the expert action.
///
/// Up to `config.n_states` expert transitions are sampled without
/// replacement; each gets `config.goodness_actions` uniform actions from the
/// action box, redrawn while within [`EXPERT_EXCLUSION`] of the expert
/// action.
pub fn goodness(critic: &dyn ActionValue, expert: &OfflineDataset, config: &AnalysisConfig, rng: &mut Rng) -> Result<f64> {
    if expert.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.goodness_actions == 0 || config.n_states == 0 {
        return Err(Error::Config("goodness needs at least one state and one action".into()));
    }
    let spec = expert.spec();
    let k = config.goodness_actions;
    let n = config.n_states.min(expert.len());
    let mut picked = rand::seq::index::sample(rng, expert.len(), n).into_vec();
    picked.sort_unstable();
    let chosen: Vec<_> = picked.iter().map(|&i| expert.transitions()[i].clone()).collect();
    let (states, expert_actions) = raw_rows(&chosen, expert);

    let rows = n * (k + 1);
    let mut all_states = Array2::zeros((rows, spec.state_dim));
    let mut all_actions = Array2::zeros((rows, spec.action_dim));
    for i in 0..n {
        let expert_action = expert_actions.row(i);
        for j in 0..=k {
            let r = i * (k + 1) + j;
            all_states.row_mut(r).assign(&states.row(i));
            if j == 0 {
                all_actions.row_mut(r).assign(&expert_action);
                continue;
            }
            loop {
                let candidate: Vec<f64> = (0..spec.action_dim)
                    .map(|d| rng.uniform(spec.action_low[d], spec.action_high[d]))
                    .collect();
                let dist = candidate
                    .iter()
                    .zip(expert_action.iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if dist > EXPERT_EXCLUSION {
                    all_actions.row_mut(r).assign(&ndarray::ArrayView1::from(&candidate));
                    break;
                }
            }
        }
    }
    let q = critic.action_values(&all_states, &all_actions)?;
    let mut below = 0usize;
    for i in 0..n {
        let base = i * (k + 1);
        below += (1..=k).filter(|j| q[base + j] < q[base]).count();
    }
    Ok(below as f64 / (n * k) as f64)
}

/// `r ↦ scale·r + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub scale: f64,
    pub offset: f64,
}

impl AffineTransform {
    pub const IDENTITY: Self = Self { scale: 1.0, offset: 0.0 };

    pub fn apply(&self, r: f64) -> f64 {
        self.scale * r + self.offset
    }
}

pub fn transform_rewards(dataset: &OfflineDataset, transform: AffineTransform) -> Result<OfflineDataset> {
    let rewards = dataset
        .rewards()
        .ok_or_else(|| Error::Unlabeled("reward transformation".into()))?;
    dataset.map_rewards(|i, _| transform.apply(rewards[i]))
}

/// Least-squares `(scale, offset)` taking ground-truth rewards to model
/// rewards over matched transitions.
pub fn fit_affine_to_model(ground_truth: &OfflineDataset, model: &OfflineDataset) -> Result<AffineTransform> {
    if ground_truth.content_hash() != model.content_hash() {
        return Err(Error::Precondition(
            "ground-truth and model labels must cover the same transitions".into(),
        ));
    }
    let x = ground_truth
        .rewards()
        .ok_or_else(|| Error::Unlabeled("affine fit (ground truth)".into()))?;
    let y = model
        .rewards()
        .ok_or_else(|| Error::Unlabeled("affine fit (model)".into()))?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(&y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateCorrelation(
            "ground-truth rewards are constant; no affine fit exists".into(),
        ));
    }
    let scale = sxy / sxx;
    Ok(AffineTransform {
        scale,
        offset: my - scale * mx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    Trofi,
    GroundTruth,
    Constant,
    Random,
    Transformed,
}

impl RewardSource {
    pub fn name(self) -> &'static str {
        match self {
            RewardSource::Trofi => "trofi",
            RewardSource::GroundTruth => "ground_truth",
            RewardSource::Constant => "constant",
            RewardSource::Random => "random",
            RewardSource::Transformed => "transformed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub train_dataset_hash: String,
    pub expert_dataset_hash: String,
    pub agent_hash: String,
    pub config: AnalysisConfig,
    pub pearson_aggregation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub reward_source: RewardSource,
    pub performance: f64,
    pub pearson_on_train: Option<f64>,
    pub pearson_on_train_skipped: usize,
    pub pearson_on_expert: Option<f64>,
    pub pearson_on_expert_skipped: usize,
    pub goodness_on_expert: f64,
    pub provenance: ReportProvenance,
}

impl AnalysisReport {
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
        let mut out = String::new();
        let _ = writeln!(out, "| metric | value |");
        let _ = writeln!(out, "|---|---|");
        let _ = writeln!(out, "| reward source | {} |", self.reward_source.name());
        let _ = writeln!(out, "| normalized score | {:.2} |", self.performance);
        let _ = writeln!(
            out,
            "| PC (training data) | {} ({} skipped) |",
            fmt(self.pearson_on_train),
            self.pearson_on_train_skipped
        );
        let _ = writeln!(
            out,
            "| PC (expert data) | {} ({} skipped) |",
            fmt(self.pearson_on_expert),
            self.pearson_on_expert_skipped
        );
        let _ = writeln!(out, "| Goodness (expert data) | {:.3} |", self.goodness_on_expert);
        out
    }
}

/// Performance, value-return correlation on the training data and on an
/// expert dataset, and Goodness on the expert dataset.
///
/// `expert` must be labeled with the same reward function the agent was
/// trained on, so that its discounted returns are the quantity the critic
/// estimates.
pub fn build_report(
    agent: &dyn AnalyzedAgent,
    train: &OfflineDataset,
    expert: &OfflineDataset,
    source: RewardSource,
    config: &AnalysisConfig,
) -> Result<AnalysisReport> {
    if config.gamma != agent.training_gamma() {
        return Err(Error::Config(format!(
            "analysis gamma {} differs from the agent's training gamma {}",
            config.gamma,
            agent.training_gamma()
        )));
    }
    let root = Rng::new(config.seed);
    let performance = evaluate(agent as &dyn Controller, &train.spec(), config.eval_episodes, root.split(1).seed())?.normalized_score;
    let on_train = value_return_correlation(agent, train, config)?;
    let on_expert = value_return_correlation(agent, expert, config)?;
    let g = goodness(agent, expert, config, &mut root.split(2))?;
    Ok(AnalysisReport {
        reward_source: source,
        performance,
        pearson_on_train: on_train.mean,
        pearson_on_train_skipped: on_train.skipped,
        pearson_on_expert: on_expert.mean,
        pearson_on_expert_skipped: on_expert.skipped,
        goodness_on_expert: g,
        provenance: ReportProvenance {
            train_dataset_hash: train.content_hash(),
            expert_dataset_hash: expert.content_hash(),
            agent_hash: agent.fingerprint()?,
            config: config.clone(),
            pearson_aggregation: "per-trajectory mean".into(),
        },
    })
}

/// `episode,t,q,discounted_return` rows for plotting.
pub fn value_return_series_csv(critic: &dyn ActionValue, dataset: &OfflineDataset, gamma: f64) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["episode", "t", "q", "discounted_return"])
        .map_err(crate::reward_model::csv_err)?;
    for traj in dataset.split_trajectories()? {
        let returns = discounted_return_series(&traj, gamma)?;
        let (s, a) = raw_rows(&traj.transitions, dataset);
        let q = critic.action_values(&s, &a)?;
        for (t, (qv, g)) in q.iter().zip(&returns).enumerate() {
            w.write_record([
                traj.episode_id.to_string(),
                t.to_string(),
                qv.to_string(),
                g.to_string(),
            ])
            .map_err(crate::reward_model::csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, strip_rewards, Tier, Transition};
    use crate::envs::{EnvKind, EnvSpec};

    fn traj(rewards: &[f64]) -> Trajectory {
        Trajectory {
            episode_id: 0,
            transitions: rewards
                .iter()
                .enumerate()
                .map(|(t, &r)| Transition {
                    episode_id: 0,
                    step_index: t,
                    state: vec![0.0, 0.0],
                    action: vec![0.0],
                    next_state: vec![0.0, 0.0],
                    reward: Some(r),
                })
                .collect(),
            episodic_return: Some(rewards.iter().sum()),
        }
    }

    #[test]
    fn discounted_returns_hand_cases() {
        assert_eq!(discounted_return_series(&traj(&[1.0, 1.0, 1.0]), 0.5).unwrap(), vec![1.75, 1.5, 1.0]);
        assert_eq!(discounted_return_series(&traj(&[0.0; 4]), 0.9).unwrap(), vec![0.0; 4]);
        assert_eq!(discounted_return_series(&traj(&[3.0, -1.0, 2.0]), 0.0).unwrap(), vec![3.0, -1.0, 2.0]);
        let mut unlabeled = traj(&[1.0]);
        unlabeled.transitions[0].reward = None;
        assert!(matches!(discounted_return_series(&unlabeled, 0.9), Err(Error::Unlabeled(_))));
    }

    #[test]
    fn pearson_hand_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson_correlation(&xs, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson_correlation(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson_correlation(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            pearson_correlation(&xs, &[2.0; 4]),
            Err(Error::DegenerateCorrelation(_))
        ));
        assert!(pearson_correlation(&[1.0], &[1.0]).is_err());
        assert!(pearson_correlation(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn transform_hand_cases() {
        let ds = generate_dataset(&EnvSpec::new(EnvKind::LineWorld), Tier::Medium, 500, 1).unwrap();
        assert_eq!(transform_rewards(&ds, AffineTransform::IDENTITY).unwrap(), ds);
        let halves = ds.map_rewards(|_, _| 0.5).unwrap();
        let doubled = transform_rewards(&halves, AffineTransform { scale: 2.0, offset: 0.0 }).unwrap();
        assert!(doubled.rewards().unwrap().iter().all(|&r| r == 1.0));
        assert!(transform_rewards(&strip_rewards(&ds), AffineTransform::IDENTITY).is_err());
    }

    #[test]
    fn affine_fit_exact_and_degenerate() {
        let gt = generate_dataset(&EnvSpec::new(EnvKind::LineWorld), Tier::Medium, 500, 2).unwrap();
        let t = AffineTransform { scale: 2.0, offset: 1.0 };
        let fit = fit_affine_to_model(&gt, &transform_rewards(&gt, t).unwrap()).unwrap();
        assert!((fit.scale - 2.0).abs() < 1e-9 && (fit.offset - 1.0).abs() < 1e-9);
        let same = fit_affine_to_model(&gt, &gt).unwrap();
        assert!((same.scale - 1.0).abs() < 1e-9 && same.offset.abs() < 1e-9);
        let flat = gt.map_rewards(|_, _| 1.0).unwrap();
        assert!(matches!(
            fit_affine_to_model(&flat, &gt),
            Err(Error::DegenerateCorrelation(_))
        ));
        let other = generate_dataset(&EnvSpec::new(EnvKind::LineWorld), Tier::Medium, 500, 3).unwrap();
        assert!(fit_affine_to_model(&gt, &other).is_err());
    }

    struct ConstantCritic;

    impl ActionValue for ConstantCritic {
        fn action_values(&self, states: &Array2<f64>, _: &Array2<f64>) -> Result<Vec<f64>> {
            Ok(vec![1.0; states.nrows()])
        }
    }

    #[test]
    fn constant_critic_has_zero_goodness_and_no_correlation() {
        let ds = generate_dataset(&EnvSpec::new(EnvKind::LineWorld), Tier::Expert, 500, 4).unwrap();
        let config = AnalysisConfig {
            n_states: 50,
            ..Default::default()
        };
        assert_eq!(goodness(&ConstantCritic, &ds, &config, &mut Rng::new(0)).unwrap(), 0.0);
        let summary = value_return_correlation(&ConstantCritic, &ds, &config).unwrap();
        assert_eq!(summary.mean, None);
        assert_eq!(summary.skipped, summary.trajectories);
    }
}

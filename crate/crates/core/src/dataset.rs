//! Offline transition datasets: generation by tier, normalization, trajectory
//! grouping and the JSONL file format.
//!
//! A dataset either carries a reward on every transition (labeled) or on
//! none of them. When `norm_stats` is present the stored states have already
//! been normalized with those statistics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{rollout, episode_seed, EnvKind, EnvSpec, ExpertController};
use crate::error::{Error, Result};
use crate::nn::Rng;

pub const DATASET_VERSION: u32 = 1;

/// Floor applied to per-feature standard deviations.
pub const NORM_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    Expert,
    Medium,
    MediumReplay,
    MediumExpert,
}

impl Tier {
    pub const ALL: [Tier; 4] = [
        Tier::Expert,
        Tier::Medium,
        Tier::MediumReplay,
        Tier::MediumExpert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Expert => "expert",
            Tier::Medium => "medium",
            Tier::MediumReplay => "medium-replay",
            Tier::MediumExpert => "medium-expert",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name).ok_or_else(|| {
            Error::Config(format!(
                "unknown tier {name:?} (expected one of: expert, medium, medium-replay, medium-expert)"
            ))
        })
    }
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const EXPERT_NOISE: f64 = 0.05;
pub const MEDIUM_NOISE: f64 = 0.4;
pub const REPLAY_NOISE_START: f64 = 1.0;
pub const REPLAY_NOISE_END: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    #[serde(rename = "e")]
    pub episode_id: u64,
    #[serde(rename = "t")]
    pub step_index: usize,
    #[serde(rename = "s")]
    pub state: Vec<f64>,
    #[serde(rename = "a")]
    pub action: Vec<f64>,
    #[serde(rename = "ns")]
    pub next_state: Vec<f64>,
    #[serde(rename = "r", default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode_id: u64,
    pub transitions: Vec<Transition>,
    /// Undiscounted sum of rewards, when the source dataset is labeled.
    pub episodic_return: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> Option<Vec<f64>> {
        self.transitions.iter().map(|t| t.reward).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Normalizes each row of `states` in place.
    pub fn normalize_rows(&self, states: &mut Array2<f64>) {
        for mut row in states.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[j]) / self.std[j];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub env: EnvKind,
    pub tier: Tier,
    transitions: Vec<Transition>,
    norm_stats: Option<NormStats>,
}

impl OfflineDataset {
    /// Validates dimensions, all-or-nothing labels and episode completeness.
    pub fn new(
        env: EnvKind,
        tier: Tier,
        transitions: Vec<Transition>,
        norm_stats: Option<NormStats>,
    ) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let spec = EnvSpec::uncalibrated(env);
        let labeled = transitions[0].reward.is_some();
        for (i, t) in transitions.iter().enumerate() {
            if t.state.len() != spec.state_dim
                || t.next_state.len() != spec.state_dim
                || t.action.len() != spec.action_dim
            {
                return Err(Error::CorruptDataset(format!(
                    "transition {i} (episode {}, step {}) has wrong dimensions for {env}",
                    t.episode_id, t.step_index
                )));
            }
            if t.reward.is_some() != labeled {
                return Err(Error::CorruptDataset(format!(
                    "transition {i} (episode {}, step {}) breaks all-or-nothing reward labeling",
                    t.episode_id, t.step_index
                )));
            }
            let finite = t.state.iter().chain(&t.action).chain(&t.next_state).all(|v| v.is_finite())
                && t.reward.is_none_or(f64::is_finite);
            if !finite {
                return Err(Error::CorruptDataset(format!(
                    "transition {i} (episode {}, step {}) holds non-finite values",
                    t.episode_id, t.step_index
                )));
            }
        }
        if let Some(stats) = &norm_stats {
            if stats.mean.len() != spec.state_dim || stats.std.len() != spec.state_dim {
                return Err(Error::CorruptDataset("normalization statistics have wrong width".into()));
            }
        }
        let dataset = Self {
            env,
            tier,
            transitions,
            norm_stats,
        };
        for traj in dataset.split_trajectories()? {
            if traj.len() != spec.max_episode_steps {
                return Err(Error::CorruptDataset(format!(
                    "episode {} has {} steps, expected a complete episode of {}",
                    traj.episode_id,
                    traj.len(),
                    spec.max_episode_steps
                )));
            }
        }
        Ok(dataset)
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn labeled(&self) -> bool {
        self.transitions.first().is_some_and(|t| t.reward.is_some())
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm_stats.as_ref()
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec::new(self.env)
    }

    pub fn episode_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.transitions.iter().map(|t| t.episode_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn rewards(&self) -> Option<Vec<f64>> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    /// States as a row matrix, in transition order.
    pub fn state_matrix(&self) -> Array2<f64> {
        rows_to_matrix(self.transitions.iter().map(|t| t.state.as_slice()))
    }

    /// Replaces every reward via `f(index, transition)`; structure untouched.
    pub fn map_rewards(&self, mut f: impl FnMut(usize, &Transition) -> f64) -> Result<Self> {
        let transitions = self
            .transitions
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let reward = f(i, t);
                if !reward.is_finite() {
                    return Err(Error::Numeric(format!(
                        "label for episode {} step {} is not finite",
                        t.episode_id, t.step_index
                    )));
                }
                Ok(Transition {
                    reward: Some(reward),
                    ..t.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            transitions,
            ..self.clone()
        })
    }

    /// Requires a labeled dataset, naming `purpose` in the error otherwise.
    pub fn require_labeled(&self, purpose: &str) -> Result<()> {
        if self.labeled() {
            Ok(())
        } else {
            Err(Error::Unlabeled(purpose.to_string()))
        }
    }

    /// Checksum over the reward-free content (environment, tier, and every
    /// state, action and next state). A dataset and its labeled copies share
    /// the same hash.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.env.name().as_bytes());
        h.update([0]);
        h.update(self.tier.name().as_bytes());
        h.update([0]);
        for t in &self.transitions {
            h.update(t.episode_id.to_le_bytes());
            h.update((t.step_index as u64).to_le_bytes());
            for v in t.state.iter().chain(&t.action).chain(&t.next_state) {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }

    /// Groups transitions by episode, ordered by step index.
    pub fn split_trajectories(&self) -> Result<Vec<Trajectory>> {
        let mut groups: BTreeMap<u64, Vec<Transition>> = BTreeMap::new();
        for t in &self.transitions {
            groups.entry(t.episode_id).or_default().push(t.clone());
        }
        groups
            .into_iter()
            .map(|(episode_id, mut transitions)| {
                transitions.sort_by_key(|t| t.step_index);
                for (expected, t) in transitions.iter().enumerate() {
                    if t.step_index != expected {
                        return Err(Error::CorruptDataset(format!(
                            "episode {episode_id}: expected step {expected}, found step {}",
                            t.step_index
                        )));
                    }
                }
                let episodic_return = transitions
                    .iter()
                    .map(|t| t.reward)
                    .sum::<Option<f64>>();
                Ok(Trajectory {
                    episode_id,
                    transitions,
                    episodic_return,
                })
            })
            .collect()
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn rows_to_matrix<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Array2<f64> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut width = 0;
    for row in rows {
        width = row.len();
        data.extend_from_slice(row);
        n += 1;
    }
    Array2::from_shape_vec((n, width), data).expect("rows share a width")
}

fn noise_for_episode(tier: Tier, index: usize, episodes: usize) -> f64 {
    match tier {
        Tier::Expert => EXPERT_NOISE,
        Tier::Medium => MEDIUM_NOISE,
        Tier::MediumReplay => {
            if episodes <= 1 {
                REPLAY_NOISE_START
            } else {
                let frac = index as f64 / (episodes - 1) as f64;
                REPLAY_NOISE_START + (REPLAY_NOISE_END - REPLAY_NOISE_START) * frac
            }
        }
        Tier::MediumExpert => unreachable!("medium-expert is assembled from other tiers"),
    }
}

fn collect_episodes(
    env: &EnvSpec,
    tier: Tier,
    ids: std::ops::Range<u64>,
    seed: u64,
    out: &mut Vec<Transition>,
) -> Result<()> {
    let episodes = (ids.end - ids.start) as usize;
    for (k, id) in ids.enumerate() {
        let noise_scale = noise_for_episode(tier, k, episodes);
        let mut rng = Rng::with_stream(seed, id).split(1);
        let steps = rollout(env, &ExpertController { noise_scale }, episode_seed(seed, id), &mut rng)?;
        out.extend(steps.into_iter().enumerate().map(|(t, s)| Transition {
            episode_id: id,
            step_index: t,
            state: s.state.features,
            action: s.action.values,
            next_state: s.next_state.features,
            reward: Some(s.reward),
        }));
    }
    Ok(())
}

/// Rolls out whole episodes of the noisy expert for the given quality tier.
/// The result is labeled with ground-truth rewards.
pub fn generate_dataset(env: &EnvSpec, tier: Tier, n_transitions: usize, seed: u64) -> Result<OfflineDataset> {
    let horizon = env.max_episode_steps;
    let mut transitions = Vec::with_capacity(n_transitions);
    if tier == Tier::MediumExpert {
        let half = (n_transitions / (2 * horizon)) as u64;
        if half == 0 {
            return Err(Error::Config(format!(
                "medium-expert needs at least {} transitions (two episodes), got {n_transitions}",
                2 * horizon
            )));
        }
        collect_episodes(env, Tier::Medium, 0..half, seed, &mut transitions)?;
        collect_episodes(env, Tier::Expert, half..2 * half, seed, &mut transitions)?;
    } else {
        let episodes = (n_transitions / horizon) as u64;
        if episodes == 0 {
            return Err(Error::Config(format!(
                "{n_transitions} transitions is less than one {horizon}-step episode"
            )));
        }
        collect_episodes(env, tier, 0..episodes, seed, &mut transitions)?;
    }
    OfflineDataset::new(env.kind, tier, transitions, None)
}

/// Reward-free view of a labeled dataset.
pub fn strip_rewards(dataset: &OfflineDataset) -> OfflineDataset {
    OfflineDataset {
        transitions: dataset
            .transitions
            .iter()
            .map(|t| Transition {
                reward: None,
                ..t.clone()
            })
            .collect(),
        ..dataset.clone()
    }
}

/// Labels a raw (unnormalized) dataset with the environment's true reward.
pub fn label_ground_truth(dataset: &OfflineDataset) -> Result<OfflineDataset> {
    if dataset.norm_stats.is_some() {
        return Err(Error::Precondition(
            "ground-truth labeling needs raw states, dataset is normalized".into(),
        ));
    }
    let env = dataset.spec();
    dataset.map_rewards(|_, t| env.reward_from_features(&t.action, &t.next_state))
}

/// Per-feature mean and population standard deviation over all states.
pub fn compute_norm_stats(dataset: &OfflineDataset) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = dataset.transitions[0].state.len();
    let n = dataset.len() as f64;
    let mut mean = vec![0.0; dim];
    for t in &dataset.transitions {
        for (m, x) in mean.iter_mut().zip(&t.state) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for t in &dataset.transitions {
        for ((v, x), m) in var.iter_mut().zip(&t.state).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt().max(NORM_EPSILON)).collect();
    Ok(NormStats { mean, std })
}

/// Normalizes states and next states with `stats`.
pub fn apply_normalization(dataset: &OfflineDataset, stats: &NormStats) -> Result<OfflineDataset> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.norm_stats.is_some() {
        return Err(Error::Precondition("dataset is already normalized".into()));
    }
    if stats.dim() != dataset.spec().state_dim {
        return Err(Error::Shape(format!(
            "normalization statistics have width {}, states have {}",
            stats.dim(),
            dataset.spec().state_dim
        )));
    }
    Ok(OfflineDataset {
        transitions: dataset
            .transitions
            .iter()
            .map(|t| Transition {
                state: stats.normalize(&t.state),
                next_state: stats.normalize(&t.next_state),
                ..t.clone()
            })
            .collect(),
        norm_stats: Some(stats.clone()),
        ..dataset.clone()
    })
}

/// Returns the dataset's states as a matrix normalized with `stats`,
/// whether or not the dataset was stored normalized. A dataset normalized
/// with different statistics is rejected.
pub fn normalized_states(dataset: &OfflineDataset, stats: &NormStats, next: bool) -> Result<Array2<f64>> {
    let rows = dataset
        .transitions
        .iter()
        .map(|t| if next { t.next_state.as_slice() } else { t.state.as_slice() });
    let mut m = rows_to_matrix(rows);
    if m.ncols() != stats.dim() {
        return Err(Error::Shape(format!(
            "states have width {}, normalization expects {}",
            m.ncols(),
            stats.dim()
        )));
    }
    match &dataset.norm_stats {
        Some(own) if own == stats => {}
        Some(_) => {
            return Err(Error::Precondition(
                "dataset was normalized with different statistics".into(),
            ))
        }
        None => stats.normalize_rows(&mut m),
    }
    Ok(m)
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    env: EnvKind,
    tier: Tier,
    labeled: bool,
    norm_mean: Option<Vec<f64>>,
    norm_std: Option<Vec<f64>>,
}

/// Writes the JSONL form: a header line, then one transition per line.
pub fn save_dataset(dataset: &OfflineDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset(dataset: &OfflineDataset, w: &mut impl Write) -> Result<()> {
    let header = Header {
        version: DATASET_VERSION,
        env: dataset.env,
        tier: dataset.tier,
        labeled: dataset.labeled(),
        norm_mean: dataset.norm_stats.as_ref().map(|s| s.mean.clone()),
        norm_std: dataset.norm_stats.as_ref().map(|s| s.std.clone()),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for t in &dataset.transitions {
        serde_json::to_writer(&mut *w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        None => return Err(parse_err(1, "missing header line".into())),
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| parse_err(1, e.to_string()))?,
    };
    if header.version != DATASET_VERSION {
        return Err(parse_err(1, format!("unsupported dataset version {}", header.version)));
    }
    let norm_stats = match (header.norm_mean, header.norm_std) {
        (Some(mean), Some(std)) => Some(NormStats { mean, std }),
        (None, None) => None,
        _ => return Err(parse_err(1, "norm_mean and norm_std must appear together".into())),
    };
    let mut transitions = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Transition = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        if t.reward.is_some() != header.labeled {
            return Err(parse_err(
                i + 1,
                format!("reward presence contradicts header labeled={}", header.labeled),
            ));
        }
        transitions.push(t);
    }
    if transitions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    OfflineDataset::new(header.env, header.tier, transitions, norm_stats)
}

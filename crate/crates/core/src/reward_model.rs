//! Reward inference from a ranking over trajectories.
//!
//! A state-only reward network is trained so that, for every sampled pair of
//! length-L snippets, the summed reward of the snippet taken from the better
//! trajectory wins a two-way softmax. The per-pair loss
//! `-log(e^high / (e^low + e^high))` is evaluated as `softplus(low - high)`.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_norm_stats, normalized_states, NormStats, OfflineDataset};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, Gradients, Mlp, Rng};
use crate::ranking::RankedSet;

const INIT_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const PAIR_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

/// Output-layer weights are shrunk at init so snippet sums start near zero.
const OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrainConfig {
    pub snippet_length: usize,
    pub pairs_per_update: usize,
    pub updates: usize,
    pub learning_rate: f64,
    pub hidden_sizes: Vec<usize>,
    pub seed: u64,
    /// Share of ranked trajectories held out for accuracy checks. No holdout
    /// is taken when it would leave fewer than two on either side.
    pub holdout_fraction: f64,
    pub log_every: usize,
    /// Pairs sampled by each held-out accuracy check.
    pub eval_pairs: usize,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            snippet_length: 100,
            pairs_per_update: 16,
            updates: 2_000,
            learning_rate: 1e-3,
            hidden_sizes: vec![32, 32],
            seed: 0,
            holdout_fraction: 0.1,
            log_every: 100,
            eval_pairs: 1_000,
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snippet_length == 0 || self.pairs_per_update == 0 {
            return Err(Error::Config(
                "snippet length and pairs per update must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(
                "learning rate must be positive and holdout fraction in [0, 1)".into(),
            ));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Learned reward over normalized states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub version: u32,
    pub env: EnvKind,
    pub net: Mlp,
    pub norm_stats: NormStats,
    pub config: Option<RewardTrainConfig>,
}

pub const REWARD_MODEL_VERSION: u32 = 1;

impl RewardModel {
    pub fn new(env: EnvKind, net: Mlp, norm_stats: NormStats) -> Result<Self> {
        if net.input_dim() != norm_stats.dim() || net.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "reward network maps {} -> {}, expected {} -> 1",
                net.input_dim(),
                net.output_dim(),
                norm_stats.dim()
            )));
        }
        Ok(Self {
            version: REWARD_MODEL_VERSION,
            env,
            net,
            norm_stats,
            config: None,
        })
    }

    /// Rewards for rows of already-normalized states.
    pub fn predict_normalized(&self, states: &Array2<f64>) -> Result<Array1<f64>> {
        let out = self.net.forward(states.view())?;
        let r = out.index_axis_move(Axis(1), 0);
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("reward model produced a non-finite value".into()));
        }
        Ok(r)
    }

    /// Reward for one raw state.
    pub fn predict_raw(&self, features: &[f64]) -> Result<f64> {
        let x = Array2::from_shape_vec((1, features.len()), self.norm_stats.normalize(features))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.predict_normalized(&x)?[0])
    }
}

/// Two snippets of normalized states; `high` comes from the better trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetPair {
    pub low: Array2<f64>,
    pub high: Array2<f64>,
    pub low_id: u64,
    pub high_id: u64,
    pub low_start: usize,
    pub high_start: usize,
}

/// Normalized state matrices of ranked trajectories, worst first.
#[derive(Debug, Clone)]
pub struct RankedStates {
    pub ids: Vec<u64>,
    pub states: Vec<Array2<f64>>,
}

impl RankedStates {
    pub fn new(ranked: &RankedSet, dataset: &OfflineDataset, stats: &NormStats) -> Result<Self> {
        let trajectories = ranked.trajectories(dataset)?;
        let mut ids = Vec::with_capacity(trajectories.len());
        let mut states = Vec::with_capacity(trajectories.len());
        for traj in trajectories {
            let sub = OfflineDataset::new(dataset.env, dataset.tier, traj.transitions, dataset.norm_stats().cloned())?;
            ids.push(traj.episode_id);
            states.push(normalized_states(&sub, stats, false)?);
        }
        Ok(Self { ids, states })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn select(&self, positions: &[usize]) -> Self {
        Self {
            ids: positions.iter().map(|&i| self.ids[i]).collect(),
            states: positions.iter().map(|&i| self.states[i].clone()).collect(),
        }
    }

    /// Draws `n` snippet pairs: two distinct ranked trajectories uniformly,
    /// then an independent uniform window of `length` states from each.
    pub fn sample_pairs(&self, n: usize, length: usize, rng: &mut Rng) -> Result<Vec<SnippetPair>> {
        if self.len() < 2 {
            return Err(Error::Precondition(format!(
                "snippet sampling needs at least 2 ranked trajectories, got {}",
                self.len()
            )));
        }
        if let Some((id, s)) = self.ids.iter().zip(&self.states).find(|(_, s)| s.nrows() < length) {
            return Err(Error::Precondition(format!(
                "trajectory {id} has {} states, shorter than snippet length {length}",
                s.nrows()
            )));
        }
        let k = self.len();
        Ok((0..n)
            .map(|_| {
                let a = rng.below(k);
                let mut b = rng.below(k - 1);
                if b >= a {
                    b += 1;
                }
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                let low_start = rng.below(self.states[lo].nrows() - length + 1);
                let high_start = rng.below(self.states[hi].nrows() - length + 1);
                SnippetPair {
                    low: self.states[lo].slice(s![low_start..low_start + length, ..]).to_owned(),
                    high: self.states[hi].slice(s![high_start..high_start + length, ..]).to_owned(),
                    low_id: self.ids[lo],
                    high_id: self.ids[hi],
                    low_start,
                    high_start,
                }
            })
            .collect())
    }
}

pub fn sample_snippet_pairs(
    ranked: &RankedSet,
    dataset: &OfflineDataset,
    stats: &NormStats,
    config: &RewardTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<SnippetPair>> {
    RankedStates::new(ranked, dataset, stats)?.sample_pairs(config.pairs_per_update, config.snippet_length, rng)
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise loss for one pair given its snippet reward sums.
pub fn pair_loss(low_sum: f64, high_sum: f64) -> f64 {
    softplus(low_sum - high_sum)
}

/// Mean pairwise ranking loss over `pairs` and its exact parameter gradient.
pub fn trex_loss(model: &RewardModel, pairs: &[SnippetPair]) -> Result<(f64, Gradients)> {
    if pairs.is_empty() {
        return Err(Error::Precondition("ranking loss needs at least one pair".into()));
    }
    let dim = model.net.input_dim();
    let total_rows: usize = pairs.iter().map(|p| p.low.nrows() + p.high.nrows()).sum();
    let mut batch = Array2::zeros((total_rows, dim));
    let mut row = 0;
    for p in pairs {
        for snippet in [&p.low, &p.high] {
            if snippet.ncols() != dim {
                return Err(Error::Shape(format!(
                    "snippet states have width {}, reward model expects {dim}",
                    snippet.ncols()
                )));
            }
            batch.slice_mut(s![row..row + snippet.nrows(), ..]).assign(snippet);
            row += snippet.nrows();
        }
    }
    let trace = model.net.forward_trace(batch.view())?;
    let out = trace.output();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("reward model produced a non-finite value".into()));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut upstream = Array2::zeros((total_rows, 1));
    let mut loss = 0.0;
    let mut row = 0;
    for p in pairs {
        let (nl, nh) = (p.low.nrows(), p.high.nrows());
        let low_sum = out.slice(s![row..row + nl, 0]).sum();
        let high_sum = out.slice(s![row + nl..row + nl + nh, 0]).sum();
        let diff = low_sum - high_sum;
        loss += softplus(diff);
        let g = sigmoid(diff) * scale;
        upstream.slice_mut(s![row..row + nl, 0]).fill(g);
        upstream.slice_mut(s![row + nl..row + nl + nh, 0]).fill(-g);
        row += nl + nh;
    }
    let back = model.net.backward(&trace, upstream.view())?;
    Ok((loss * scale, back.params))
}

/// Fraction of sampled pairs (positions in `sums`, which is in rank order,
/// worst first) whose better member has the strictly larger sum.
///
/// Pairs are distinct and drawn without replacement, so asking for at least
/// `k(k-1)/2` pairs scores every pair exactly once.
pub fn pairwise_accuracy_from_sums(sums: &[f64], n_pairs: usize, rng: &mut Rng) -> Result<f64> {
    let k = sums.len();
    if k < 2 {
        return Err(Error::Precondition(format!(
            "pairwise accuracy needs at least 2 trajectories, got {k}"
        )));
    }
    if n_pairs == 0 {
        return Err(Error::Precondition("pairwise accuracy needs n_pairs >= 1".into()));
    }
    let population = k * (k - 1) / 2;
    let drawn = rand::seq::index::sample(rng, population, n_pairs.min(population));
    let correct = drawn
        .iter()
        .filter(|&p| {
            let (lo, hi) = unrank_pair(p);
            sums[hi] > sums[lo]
        })
        .count();
    Ok(correct as f64 / drawn.len() as f64)
}

/// Maps `0..k(k-1)/2` onto pairs `(lo, hi)` with `lo < hi`.
fn unrank_pair(index: usize) -> (usize, usize) {
    let mut hi = ((((8 * index + 1) as f64).sqrt() - 1.0) / 2.0) as usize + 1;
    while hi * (hi - 1) / 2 > index {
        hi -= 1;
    }
    while (hi + 1) * hi / 2 <= index {
        hi += 1;
    }
    (index - hi * (hi - 1) / 2, hi)
}

/// Summed predicted reward over each trajectory in `ranked`.
pub fn trajectory_sums(model: &RewardModel, ranked: &RankedStates) -> Result<Vec<f64>> {
    ranked
        .states
        .iter()
        .map(|s| Ok(model.predict_normalized(s)?.sum()))
        .collect()
}

/// Full-trajectory ordering accuracy of the model on `holdout`. Ties count
/// as failures.
pub fn pairwise_accuracy(model: &RewardModel, holdout: &RankedStates, n_pairs: usize, rng: &mut Rng) -> Result<f64> {
    if holdout.len() < 2 {
        return Err(Error::Precondition(format!(
            "pairwise accuracy needs at least 2 held-out trajectories, got {}",
            holdout.len()
        )));
    }
    pairwise_accuracy_from_sums(&trajectory_sums(model, holdout)?, n_pairs, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLogRow {
    pub update: usize,
    pub loss: f64,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardTrainingLog {
    pub rows: Vec<RewardLogRow>,
    pub holdout_ids: Vec<u64>,
    pub train_ids: Vec<u64>,
}

impl RewardTrainingLog {
    pub fn final_holdout_accuracy(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.holdout_accuracy)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["update", "loss", "holdout_accuracy"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.update.to_string(),
                r.loss.to_string(),
                r.holdout_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Positions (into a ranking of `n`) held out for accuracy checks.
pub fn holdout_positions(n: usize, fraction: f64, rng: &mut Rng) -> Vec<usize> {
    let h = (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if h < 2 || n < h + 2 {
        return Vec::new();
    }
    let mut picked = rand::seq::index::sample(rng, n, h).into_vec();
    picked.sort_unstable();
    picked
}

/// Fits a reward model to `ranked` over `dataset` states.
///
/// States are normalized with the dataset's own statistics (computed here
/// if the dataset is raw). Each update draws a fresh batch of snippet pairs
/// from the non-held-out trajectories.
pub fn train_reward(
    ranked: &RankedSet,
    dataset: &OfflineDataset,
    config: &RewardTrainConfig,
) -> Result<(RewardModel, RewardTrainingLog)> {
    config.validate()?;
    ranked.validate(dataset)?;
    let stats = match dataset.norm_stats() {
        Some(s) => s.clone(),
        None => compute_norm_stats(dataset)?,
    };
    let all = RankedStates::new(ranked, dataset, &stats)?;
    let root = Rng::new(config.seed);

    let held = holdout_positions(all.len(), config.holdout_fraction, &mut root.split(SPLIT_STREAM));
    let kept: Vec<usize> = (0..all.len()).filter(|i| !held.contains(i)).collect();
    let train = all.select(&kept);
    let holdout = all.select(&held);

    let sizes: Vec<usize> = std::iter::once(stats.dim())
        .chain(config.hidden_sizes.iter().copied())
        .chain(std::iter::once(1))
        .collect();
    let mut net = Mlp::init(&sizes, Activation::Relu, Activation::Identity, &mut root.split(INIT_STREAM))?;
    if let Some(last) = net.layers_mut().last_mut() {
        last.weights *= OUTPUT_INIT_SCALE;
    }
    let mut model = RewardModel::new(dataset.env, net, stats)?;
    model.config = Some(config.clone());
    let mut adam = AdamState::new(&model.net, AdamConfig::with_learning_rate(config.learning_rate));
    let mut pair_rng = root.split(PAIR_STREAM);

    let mut log = RewardTrainingLog {
        rows: Vec::new(),
        holdout_ids: holdout.ids.clone(),
        train_ids: train.ids.clone(),
    };
    let accuracy = |model: &RewardModel| -> Result<Option<f64>> {
        if holdout.len() < 2 {
            return Ok(None);
        }
        pairwise_accuracy(model, &holdout, config.eval_pairs, &mut root.split(EVAL_STREAM)).map(Some)
    };

    for update in 0..config.updates {
        let pairs = train.sample_pairs(config.pairs_per_update, config.snippet_length, &mut pair_rng)?;
        let (loss, grads) = trex_loss(&model, &pairs)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("ranking loss is {loss} at update {update}")));
        }
        if update % config.log_every == 0 {
            log.rows.push(RewardLogRow {
                update,
                loss,
                holdout_accuracy: accuracy(&model)?,
            });
        }
        adam_step(&mut model.net, &grads, &mut adam)?;
    }
    let final_loss = {
        let pairs = train.sample_pairs(config.pairs_per_update, config.snippet_length, &mut pair_rng)?;
        trex_loss(&model, &pairs)?.0
    };
    log.rows.push(RewardLogRow {
        update: config.updates,
        loss: final_loss,
        holdout_accuracy: accuracy(&model)?,
    });
    Ok((model, log))
}

/// Sets every transition's reward to the model's prediction on its
/// (normalized) state. A labeled dataset is only relabeled when
/// `overwrite` is set.
pub fn label_dataset(dataset: &OfflineDataset, model: &RewardModel, overwrite: bool) -> Result<OfflineDataset> {
    if dataset.labeled() && !overwrite {
        return Err(Error::Precondition(
            "dataset already carries rewards; pass overwrite to relabel".into(),
        ));
    }
    if dataset.env != model.env {
        return Err(Error::Config(format!(
            "reward model is for {}, dataset is {}",
            model.env, dataset.env
        )));
    }
    let states = normalized_states(dataset, &model.norm_stats, false)?;
    let rewards = model.predict_normalized(&states)?;
    dataset.map_rewards(|i, _| rewards[i])
}

//! Ranked subsets of trajectories: sampling, oracle ordering, controlled
//! corruption, and the `ranking.json` exchange format.
//!
//! Orders always run worst → best.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::{OfflineDataset, Trajectory};
use crate::envs::EnvKind;
use crate::error::{Error, RankingError, Result};
use crate::nn::Rng;

pub const RANKING_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingSource {
    Oracle,
    Human,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedSet {
    pub version: u32,
    pub env: EnvKind,
    pub dataset_hash: String,
    pub source: RankingSource,
    /// Episode ids from worst to best.
    #[serde(rename = "order")]
    pub trajectory_ids: Vec<u64>,
}

impl RankedSet {
    pub fn len(&self) -> usize {
        self.trajectory_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory_ids.is_empty()
    }

    /// Checks the ranking against `dataset`: same environment and content
    /// hash, ids unique and present.
    pub fn validate(&self, dataset: &OfflineDataset) -> Result<(), RankingError> {
        if self.version != RANKING_VERSION {
            return Err(RankingError::Version(self.version));
        }
        if self.env != dataset.env {
            return Err(RankingError::EnvMismatch {
                expected: dataset.env.to_string(),
                found: self.env.to_string(),
            });
        }
        let expected = dataset.content_hash();
        if self.dataset_hash != expected {
            return Err(RankingError::StaleRanking {
                expected,
                found: self.dataset_hash.clone(),
            });
        }
        let known: BTreeSet<u64> = dataset.episode_ids().into_iter().collect();
        check_ids(&self.trajectory_ids, &known)?;
        if self.len() < 2 {
            return Err(RankingError::TooFew(self.len()));
        }
        Ok(())
    }

    /// The ranked trajectories of `dataset`, worst first.
    pub fn trajectories(&self, dataset: &OfflineDataset) -> Result<Vec<Trajectory>> {
        let mut by_id: HashMap<u64, Trajectory> = dataset
            .split_trajectories()?
            .into_iter()
            .map(|t| (t.episode_id, t))
            .collect();
        self.trajectory_ids
            .iter()
            .map(|id| {
                by_id
                    .remove(id)
                    .ok_or(Error::Ranking(RankingError::UnknownId(*id)))
            })
            .collect()
    }
}

/// Every id unique and drawn from `known`.
pub fn check_ids(order: &[u64], known: &BTreeSet<u64>) -> Result<(), RankingError> {
    let mut seen = BTreeSet::new();
    for &id in order {
        if !known.contains(&id) {
            return Err(RankingError::UnknownId(id));
        }
        if !seen.insert(id) {
            return Err(RankingError::DuplicateId(id));
        }
    }
    Ok(())
}

/// `order` must be a permutation of `expected`.
pub fn check_permutation(order: &[u64], expected: &BTreeSet<u64>) -> Result<(), RankingError> {
    check_ids(order, expected)?;
    if let Some(missing) = expected.iter().find(|id| !order.contains(id)) {
        return Err(RankingError::MissingId(*missing));
    }
    Ok(())
}

/// Number selected by `fraction` of `count`, rounding up.
pub fn subsample_count(fraction: f64, count: usize) -> usize {
    // Guard against products like 0.05·200 = 10.000000000000002.
    ((fraction * count as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Uniform sample without replacement of `ceil(fraction·count)`
/// trajectories, returned in episode-id order.
pub fn subsample_trajectories(dataset: &OfflineDataset, fraction: f64, seed: u64) -> Result<Vec<Trajectory>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("ranked fraction {fraction} outside (0, 1]")));
    }
    let trajectories = dataset.split_trajectories()?;
    let k = subsample_count(fraction, trajectories.len());
    if k < 2 {
        return Err(Error::Ranking(RankingError::TooFew(k)));
    }
    let mut rng = Rng::new(seed);
    let mut picked = index::sample(&mut rng, trajectories.len(), k).into_vec();
    picked.sort_unstable();
    let mut slots: Vec<Option<Trajectory>> = trajectories.into_iter().map(Some).collect();
    Ok(picked.into_iter().map(|i| slots[i].take().expect("indices are distinct")).collect())
}

/// Orders trajectories by ground-truth return, ascending; ties by episode id.
pub fn oracle_rank(trajectories: &[Trajectory], env: EnvKind, dataset_hash: &str) -> Result<RankedSet> {
    let mut keyed = trajectories
        .iter()
        .map(|t| {
            t.episodic_return.map(|r| (r, t.episode_id)).ok_or_else(|| {
                Error::Unlabeled(format!(
                    "oracle ranking needs ground-truth returns; episode {} has none",
                    t.episode_id
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(RankedSet {
        version: RANKING_VERSION,
        env,
        dataset_hash: dataset_hash.to_string(),
        source: RankingSource::Oracle,
        trajectory_ids: keyed.into_iter().map(|(_, id)| id).collect(),
    })
}

/// Swaps `floor(swap_fraction·n / 2)` disjoint random pairs of positions.
pub fn perturb_ranking(ranked: &RankedSet, swap_fraction: f64, seed: u64) -> Result<RankedSet> {
    if !(0.0..=1.0).contains(&swap_fraction) {
        return Err(Error::Config(format!("swap fraction {swap_fraction} outside [0, 1]")));
    }
    let n = ranked.len();
    let pairs = ((swap_fraction * n as f64) / 2.0 + 1e-9).floor() as usize;
    let mut order = ranked.trajectory_ids.clone();
    if pairs > 0 {
        let mut rng = Rng::new(seed);
        let positions = index::sample(&mut rng, n, 2 * pairs).into_vec();
        for pair in positions.chunks_exact(2) {
            order.swap(pair[0], pair[1]);
        }
    }
    Ok(RankedSet {
        source: RankingSource::Perturbed,
        trajectory_ids: order,
        ..ranked.clone()
    })
}

pub fn save_ranking(ranked: &RankedSet, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(ranked)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_ranking(path: &Path) -> Result<RankedSet> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads and validates a ranking written by a person (or the ranking UI).
pub fn import_human_ranking(path: &Path, dataset: &OfflineDataset) -> Result<RankedSet> {
    let mut ranked = load_ranking(path)?;
    ranked.validate(dataset)?;
    ranked.source = RankingSource::Human;
    Ok(ranked)
}

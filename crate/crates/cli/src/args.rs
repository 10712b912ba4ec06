//! Command-line surface. Every argument struct also round-trips through
//! serde so that a `--config` TOML file can override individual flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use trofi_core::dataset::Tier;
use trofi_core::envs::EnvKind;
use trofi_core::policy::PolicyConfig;
use trofi_core::reward_model::RewardTrainConfig;

pub const DEFAULT_OUT: &str = "trofi-out";

#[derive(Debug, Parser)]
#[command(name = "trofi", version, about = "Offline RL from ranked trajectories")]
pub struct Cli {
    /// TOML file whose keys override the command-line flags
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate an offline dataset and its ground-truth companion
    GenData(GenDataArgs),
    /// Subsample and rank trajectories
    Rank(RankArgs),
    /// Fit a reward model to the ranking
    TrainReward(TrainRewardArgs),
    /// Label the dataset with the reward model
    Label(LabelArgs),
    /// Train a TD3+BC agent (or a BC actor) on labeled data
    TrainPolicy(TrainPolicyArgs),
    /// Roll out a trained policy
    Evaluate(EvaluateArgs),
    /// Value-function diagnostics for trained agents
    Analyze(AnalyzeArgs),
    /// Full experiment across seeds
    Pipeline(PipelineArgs),
    /// Serve the ranking session for the browser UI
    ServeRank(ServeRankArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Rank(_) => "rank",
            Command::TrainReward(_) => "train-reward",
            Command::Label(_) => "label",
            Command::TrainPolicy(_) => "train-policy",
            Command::Evaluate(_) => "evaluate",
            Command::Analyze(_) => "analyze",
            Command::Pipeline(_) => "pipeline",
            Command::ServeRank(_) => "serve-rank",
        }
    }
}

pub fn parse_env(s: &str) -> Result<EnvKind, String> {
    EnvKind::from_name(s).map_err(|e| e.to_string())
}

pub fn parse_tier(s: &str) -> Result<Tier, String> {
    Tier::from_name(s).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, value_parser = parse_env, default_value = "lineworld")]
    pub env: EnvKind,
    #[arg(long, value_parser = parse_tier, default_value = "medium")]
    pub tier: Tier,
    /// Number of transitions
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, env = "TROFI_OUT", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceArg {
    Oracle,
    Human,
    Perturbed,
}

/// Swap fraction used by `--source perturbed` when `--perturb` is absent.
pub const DEFAULT_SWAP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RankArgs {
    /// Share of trajectories to rank
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, value_enum, default_value = "oracle")]
    pub source: SourceArg,
    /// Swap this share of positions after oracle ranking
    #[arg(long)]
    pub perturb: Option<f64>,
    /// Ranking file produced by the ranking UI (with `--source human`)
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reward-free dataset [default: <out>/dataset.jsonl]
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Ground-truth companion [default: <out>/dataset.gt.jsonl]
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, env = "TROFI_OUT", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct RewardOverrides {
    /// Snippet length [default: 100]
    #[arg(long)]
    pub snippet_length: Option<usize>,
    /// Snippet pairs per update [default: 16]
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Gradient updates [default: 2000]
    #[arg(long)]
    pub reward_updates: Option<usize>,
    /// Adam learning rate [default: 1e-3]
    #[arg(long)]
    pub reward_lr: Option<f64>,
    /// Hidden layer widths [default: 32,32]
    #[arg(long, value_delimiter = ',')]
    pub reward_hidden: Option<Vec<usize>>,
}

impl RewardOverrides {
    pub fn resolve(&self, seed: u64) -> RewardTrainConfig {
        let d = RewardTrainConfig::default();
        RewardTrainConfig {
            snippet_length: self.snippet_length.unwrap_or(d.snippet_length),
            pairs_per_update: self.pairs.unwrap_or(d.pairs_per_update),
            updates: self.reward_updates.unwrap_or(d.updates),
            learning_rate: self.reward_lr.unwrap_or(d.learning_rate),
            hidden_sizes: self.reward_hidden.clone().unwrap_or(d.hidden_sizes),
            seed,
            ..d
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainRewardArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub reward: RewardOverrides,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reward-free dataset [default: <out>/dataset.jsonl]
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, env = "TROFI_OUT", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LabelArgs {
    /// Reward-free dataset [default: <out>/dataset.jsonl]
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, env = "TROFI_OUT", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardArg {
    Trofi,
    Gt,
    Constant,
    Random,
    Transformed,
}

impl RewardArg {
    pub const ALL: [RewardArg; 5] = [
        RewardArg::Trofi,
        RewardArg::Gt,
        RewardArg::Constant,
        RewardArg::Random,
        RewardArg::Transformed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardArg::Trofi => "trofi",
            RewardArg::Gt => "gt",
            RewardArg::Constant => "constant",
            RewardArg::Random => "random",
            RewardArg::Transformed => "transformed",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct PolicyOverrides {
    /// Gradient updates [default: 5000]
    #[arg(long)]
    pub updates: Option<usize>,
    /// Minibatch size [default: 256]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Behavior-cloning trade-off [default: 2.5]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Discount [default: 0.99]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Hidden layer widths [default: 32,32]
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Actor and critic learning rate [default: 3e-4]
    #[arg(long)]
    pub lr: Option<f64>,
}

impl PolicyOverrides {
    pub fn resolve(&self, seed: u64) -> PolicyConfig {
        let d = PolicyConfig::default();
        PolicyConfig {
            updates: self.updates.unwrap_or(d.updates),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            alpha: self.alpha.unwrap_or(d.alpha),
            gamma: self.gamma.unwrap_or(d.gamma),
            hidden_sizes: self.hidden.clone().unwrap_or(d.hidden_sizes),
            actor_learning_rate: self.lr.unwrap_or(d.actor_learning_rate),
            critic_learning_rate: self.lr.unwrap_or(d.critic_learning_rate),
            seed,
            ..d
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainPolicyArgs {
    /// Reward labels to train on
    #[arg(long, value_enum, default_value = "trofi")]
    pub reward: RewardArg,
    /// Train the behavior-cloning baseline instead (rewards unused)
    #[arg(long)]
    pub bc: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub policy: PolicyOverrides,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reward-free dataset [default: <out>/dataset.jsonl]
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Ground-truth companion [default: <out>/dataset.gt.jsonl]
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, env = "TROFI_OUT", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

impl TrainPolicyArgs {
    pub fn method(&self) -> Method {
        if self.bc {
            Method::Bc
        } else {
            Method::Reward(self.reward)
        }
    }
}

/// A trained policy artifact: a TD3+BC agent for some reward, or BC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Reward(RewardArg),
    Bc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Reward(r) => r.name(),
            Method::Bc => "bc",
        }
    }

    pub fn agent_file(self, out: &Path) -> PathBuf {
        match self {
            Method::Reward(r) => out.join(format!("agent.{}.json", r.name())),
            Method::Bc => out.join("bc.json"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Trofi,
    Gt,
    Constant,
    Random,
    Transformed,
    Bc,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Trofi => Method::Reward(RewardArg::Trofi),
            MethodArg::Gt => Method::Reward(RewardArg::Gt),
            MethodArg::Constant => Method::Reward(RewardArg::Constant),
            MethodArg::Random => Method::Reward(RewardArg::Random),
            MethodArg::Transformed => Method::Reward(RewardArg::Transformed),
            MethodArg::Bc => Method::Bc,
        }
    }
}

/// Seed of the first evaluation episode; keeps evaluation rollouts apart
/// from the data-collection episodes.
pub const DEFAULT_EVAL_SEED: u64 = 1_000_000;

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long, value_enum, default_value = "trofi")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
    pub seed: u64,
    #[arg(long, env = "TROFI_OUT", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    /// Agents to analyze [default: every trained agent in <out>]
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Vec<RewardArg>,
    /// Expert dataset with ground-truth rewards [default: generated into <out>/expert.gt.jsonl]
    #[arg(long)]
    pub expert: Option<PathBuf>,
    /// Transitions in the generated expert dataset
    #[arg(long, default_value_t = 10_000)]
    pub expert_n: usize,
    /// States sampled for Goodness
    #[arg(long, default_value_t = 1000)]
    pub n_states: usize,
    /// Random actions compared per state
    #[arg(long, default_value_t = 32)]
    pub goodness_actions: usize,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reward-free dataset [default: <out>/dataset.jsonl]
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Ground-truth companion [default: <out>/dataset.gt.jsonl]
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, env = "TROFI_OUT", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PipelineArgs {
    #[arg(long, value_parser = parse_env, default_value = "lineworld")]
    pub env: EnvKind,
    #[arg(long, value_parser = parse_tier, default_value = "medium")]
    pub tier: Tier,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Base seed; run k uses base + k
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// Ranked fractions, one TROFI row each
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub fractions: Vec<f64>,
    /// Also run TROFI on perturbed rankings with this swap fraction
    #[arg(long)]
    pub perturb: Option<f64>,
    /// Ranked fractions that get a perturbed run [default: all]
    #[arg(long, value_delimiter = ',')]
    pub perturb_fractions: Option<Vec<f64>>,
    /// Baselines to run alongside TROFI
    #[arg(long, value_enum, value_delimiter = ',', default_value = "gt,constant,random,bc")]
    pub baselines: Vec<MethodArg>,
    /// Evaluation episodes per trained policy
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub reward: RewardOverrides,
    #[command(flatten)]
    #[serde(flatten)]
    pub policy: PolicyOverrides,
    #[arg(long, env = "TROFI_OUT", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ServeRankArgs {
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    /// Share of trajectories in the session
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Built UI assets [default: placeholder page]
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Reward-free dataset [default: <out>/dataset.jsonl]
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, env = "TROFI_OUT", default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

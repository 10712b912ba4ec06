//! One function per pipeline stage. Each reads its inputs from files,
//! writes its artifacts into the output directory and reports metrics; the
//! manifest is left to the caller.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use trofi_core::analysis::{
    build_report, fit_affine_to_model, transform_rewards, AffineTransform, AnalysisConfig, AnalysisReport, RewardSource,
};
use trofi_core::dataset::{generate_dataset, load_dataset, save_dataset, strip_rewards, OfflineDataset, Tier};
use trofi_core::envs::{EnvKind, EnvSpec};
use trofi_core::error::Error;
use trofi_core::policy::{
    evaluate as rollout_eval, substitute_rewards, train_bc, train_policy as fit_policy, Actor, Agent, EvalResult,
    RewardSubstitution,
};
use trofi_core::ranking::{
    import_human_ranking, load_ranking, oracle_rank, perturb_ranking, save_ranking, subsample_trajectories, RankedSet,
};
use trofi_core::reward_model::{label_dataset, train_reward as fit_reward, RewardModel};

use crate::args::{
    AnalyzeArgs, EvaluateArgs, GenDataArgs, LabelArgs, Method, RankArgs, RewardArg, SourceArg, TrainPolicyArgs,
    TrainRewardArgs, DEFAULT_SWAP_FRACTION,
};
use crate::error::{CliError, Result};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const GT_FILE: &str = "dataset.gt.jsonl";
pub const RANKING_FILE: &str = "ranking.json";
pub const REWARD_MODEL_FILE: &str = "reward_model.json";
pub const REWARD_LOG_FILE: &str = "reward_log.csv";
pub const TRANSFORM_FILE: &str = "transform.json";
pub const EXPERT_FILE: &str = "expert.gt.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.md";

/// What a stage did, for the manifest and the terminal.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub key: String,
    pub metrics: Value,
    pub summary: String,
}

/// Labeled dataset a TD3+BC agent for `reward` trains on.
pub fn labeled_file(out: &Path, reward: RewardArg, gt: &Path) -> PathBuf {
    match reward {
        RewardArg::Gt => gt.to_path_buf(),
        r => out.join(format!("dataset.{}.jsonl", r.name())),
    }
}

pub fn eval_file(out: &Path, method: Method) -> PathBuf {
    out.join(format!("eval.{}.json", method.name()))
}

/// `path`, or a dependency error naming the command that produces it.
pub fn require(path: &Path, command: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Dependency {
            path: path.to_path_buf(),
            command,
        })
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, command: &'static str) -> Result<T> {
    let text = fs::read_to_string(require(path, command)?)?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    })
}

fn load(path: &Path, command: &'static str) -> Result<OfflineDataset> {
    Ok(load_dataset(&require(path, command)?)?)
}

fn or_default(path: &Option<PathBuf>, out: &Path, file: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out.join(file))
}

fn reward_summary(ds: &OfflineDataset) -> Value {
    let r = ds.rewards().unwrap_or_default();
    let n = r.len().max(1) as f64;
    json!({
        "transitions": ds.len(),
        "reward_mean": r.iter().sum::<f64>() / n,
        "reward_min": r.iter().copied().fold(f64::INFINITY, f64::min),
        "reward_max": r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

pub fn gen_data(args: &GenDataArgs) -> Result<Outcome> {
    fs::create_dir_all(&args.out)?;
    let labeled = generate_dataset(&EnvSpec::new(args.env), args.tier, args.n, args.seed)?;
    save_dataset(&strip_rewards(&labeled), &args.out.join(DATASET_FILE))?;
    save_dataset(&labeled, &args.out.join(GT_FILE))?;
    let episodes = labeled.episode_ids().len();
    Ok(Outcome {
        key: String::new(),
        metrics: json!({
            "transitions": labeled.len(),
            "episodes": episodes,
            "dataset_hash": labeled.content_hash(),
        }),
        summary: format!(
            "wrote {} transitions ({episodes} episodes) of {} {} data",
            labeled.len(),
            args.env,
            args.tier
        ),
    })
}

fn oracle_ranking(args: &RankArgs, dataset: &OfflineDataset) -> Result<RankedSet> {
    let gt = load(&or_default(&args.gt, &args.out, GT_FILE), "gen-data")?;
    gt.require_labeled("oracle ranking")?;
    if gt.content_hash() != dataset.content_hash() {
        return Err(Error::Config("ground-truth companion does not match the dataset".into()).into());
    }
    let trajectories = subsample_trajectories(&gt, args.fraction, args.seed)?;
    let ranked = oracle_rank(&trajectories, dataset.env, &dataset.content_hash())?;
    let swap = match args.source {
        SourceArg::Perturbed => Some(args.perturb.unwrap_or(DEFAULT_SWAP_FRACTION)),
        _ => args.perturb,
    };
    match swap {
        Some(s) => Ok(perturb_ranking(&ranked, s, args.seed)?),
        None => Ok(ranked),
    }
}

pub fn rank(args: &RankArgs) -> Result<Outcome> {
    fs::create_dir_all(&args.out)?;
    let dataset = load(&or_default(&args.dataset, &args.out, DATASET_FILE), "gen-data")?;
    let ranked = match args.source {
        SourceArg::Human => {
            if args.perturb.is_some() {
                return Err(CliError::Usage("--perturb applies to oracle rankings only".into()));
            }
            let input = args
                .input
                .as_ref()
                .ok_or_else(|| CliError::Usage("--source human needs --in <ranking file>".into()))?;
            import_human_ranking(&require(input, "serve-rank")?, &dataset)?
        }
        SourceArg::Oracle | SourceArg::Perturbed => oracle_ranking(args, &dataset)?,
    };
    save_ranking(&ranked, &args.out.join(RANKING_FILE))?;
    Ok(Outcome {
        key: String::new(),
        metrics: json!({ "ranked": ranked.len(), "source": ranked.source }),
        summary: format!("ranked {} trajectories ({:?})", ranked.len(), ranked.source),
    })
}

pub fn train_reward(args: &TrainRewardArgs) -> Result<Outcome> {
    let dataset = load(&or_default(&args.dataset, &args.out, DATASET_FILE), "gen-data")?;
    let ranked = load_ranking(&require(&args.out.join(RANKING_FILE), "rank")?)?;
    let config = args.reward.resolve(args.seed);
    let (model, log) = fit_reward(&ranked, &dataset, &config)?;
    write_json(&args.out.join(REWARD_MODEL_FILE), &model)?;
    fs::write(args.out.join(REWARD_LOG_FILE), log.to_csv()?)?;
    let loss = log.rows.last().map(|r| r.loss);
    let accuracy = log.final_holdout_accuracy();
    Ok(Outcome {
        key: String::new(),
        metrics: json!({
            "final_loss": loss,
            "holdout_accuracy": accuracy,
            "holdout_trajectories": log.holdout_ids.len(),
        }),
        summary: format!(
            "reward model trained: loss {}, held-out accuracy {}",
            loss.map_or("n/a".into(), |l| format!("{l:.4}")),
            accuracy.map_or("n/a".into(), |a| format!("{a:.3}"))
        ),
    })
}

pub fn label(args: &LabelArgs) -> Result<Outcome> {
    let dataset = load(&or_default(&args.dataset, &args.out, DATASET_FILE), "gen-data")?;
    let model: RewardModel = read_json(&args.out.join(REWARD_MODEL_FILE), "train-reward")?;
    let labeled = label_dataset(&dataset, &model, false)?;
    let path = labeled_file(&args.out, RewardArg::Trofi, Path::new(""));
    save_dataset(&labeled, &path)?;
    Ok(Outcome {
        key: String::new(),
        metrics: reward_summary(&labeled),
        summary: format!("labeled {} transitions → {}", labeled.len(), path.display()),
    })
}

/// Builds (and for substituted rewards, writes) the dataset a policy for
/// `method` trains on.
fn training_dataset(args: &TrainPolicyArgs, method: Method) -> Result<OfflineDataset> {
    let out = &args.out;
    let gt_path = or_default(&args.gt, out, GT_FILE);
    let reward_free = || load(&or_default(&args.dataset, out, DATASET_FILE), "gen-data");
    let reward = match method {
        Method::Bc => return reward_free(),
        Method::Reward(r) => r,
    };
    let path = labeled_file(out, reward, &gt_path);
    let labeled = match reward {
        RewardArg::Gt => return load(&path, "gen-data"),
        RewardArg::Trofi => return load(&path, "label"),
        RewardArg::Constant => substitute_rewards(&reward_free()?, RewardSubstitution::ConstantZero, args.seed)?,
        RewardArg::Random => substitute_rewards(&reward_free()?, RewardSubstitution::UniformRandom, args.seed)?,
        RewardArg::Transformed => {
            let gt = load(&gt_path, "gen-data")?;
            let trofi = load(&labeled_file(out, RewardArg::Trofi, &gt_path), "label")?;
            let transform = fit_affine_to_model(&gt, &trofi)?;
            write_json(&out.join(TRANSFORM_FILE), &transform)?;
            transform_rewards(&gt, transform)?
        }
    };
    save_dataset(&labeled, &path)?;
    Ok(labeled)
}

pub fn train_policy(args: &TrainPolicyArgs) -> Result<Outcome> {
    fs::create_dir_all(&args.out)?;
    let method = args.method();
    let config = args.policy.resolve(args.seed);
    let dataset = training_dataset(args, method)?;
    let path = method.agent_file(&args.out);
    let metrics = match method {
        Method::Bc => {
            let (actor, log) = train_bc(&dataset, &config)?;
            write_json(&path, &actor)?;
            let mut csv = String::from("update,loss\n");
            for row in &log {
                csv.push_str(&format!("{},{}\n", row.update, row.loss));
            }
            fs::write(args.out.join("bc_log.csv"), csv)?;
            json!({ "final_loss": log.last().map(|r| r.loss) })
        }
        Method::Reward(r) => {
            let (agent, log) = fit_policy(&dataset, &config)?;
            write_json(&path, &agent)?;
            fs::write(args.out.join(format!("policy_log.{}.csv", r.name())), log.to_csv()?)?;
            let last = log.rows.last();
            json!({
                "critic_loss": last.map(|r| r.critic_loss),
                "actor_loss": last.map(|r| r.actor_loss),
                "lambda": last.map(|r| r.lambda),
            })
        }
    };
    Ok(Outcome {
        key: method.name().into(),
        metrics,
        summary: format!("trained {} policy → {}", method.name(), path.display()),
    })
}

/// Loads a trained policy as a controller.
fn load_policy(out: &Path, method: Method) -> Result<(EnvKind, Box<dyn trofi_core::envs::Controller>)> {
    let path = method.agent_file(out);
    Ok(match method {
        Method::Bc => {
            let actor: Actor = read_json(&path, "train-policy --bc")?;
            (actor.env, Box::new(actor))
        }
        Method::Reward(_) => {
            let agent: Agent = read_json(&path, "train-policy")?;
            (agent.actor.env, Box::new(agent))
        }
    })
}

pub fn evaluate_policy(out: &Path, method: Method, episodes: usize, seed: u64) -> Result<EvalResult> {
    let (env, policy) = load_policy(out, method)?;
    let result = rollout_eval(policy.as_ref(), &EnvSpec::new(env), episodes, seed)?;
    write_json(&eval_file(out, method), &result)?;
    Ok(result)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<Outcome> {
    let method = Method::from(args.method);
    let result = evaluate_policy(&args.out, method, args.episodes, args.seed)?;
    Ok(Outcome {
        key: method.name().into(),
        metrics: json!({
            "episodes": args.episodes,
            "mean_return": result.mean,
            "normalized_score": result.normalized_score,
        }),
        summary: format!(
            "{}: normalized score {:.2} over {} episodes",
            method.name(),
            result.normalized_score,
            args.episodes
        ),
    })
}

fn reward_source(r: RewardArg) -> RewardSource {
    match r {
        RewardArg::Trofi => RewardSource::Trofi,
        RewardArg::Gt => RewardSource::GroundTruth,
        RewardArg::Constant => RewardSource::Constant,
        RewardArg::Random => RewardSource::Random,
        RewardArg::Transformed => RewardSource::Transformed,
    }
}

/// Expert data relabeled with the reward the `r` agent was trained on.
fn expert_for(out: &Path, expert: &OfflineDataset, r: RewardArg, seed: u64) -> Result<OfflineDataset> {
    Ok(match r {
        RewardArg::Gt => expert.clone(),
        RewardArg::Trofi => {
            let model: RewardModel = read_json(&out.join(REWARD_MODEL_FILE), "train-reward")?;
            label_dataset(expert, &model, true)?
        }
        RewardArg::Constant => substitute_rewards(expert, RewardSubstitution::ConstantZero, seed)?,
        RewardArg::Random => substitute_rewards(expert, RewardSubstitution::UniformRandom, seed)?,
        RewardArg::Transformed => {
            let t: AffineTransform = read_json(&out.join(TRANSFORM_FILE), "train-policy --reward transformed")?;
            transform_rewards(expert, t)?
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ComparativeReport {
    pub env: EnvKind,
    pub reports: Vec<AnalysisReport>,
}

impl ComparativeReport {
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
        let mut out = format!(
            "| reward source | normalized score | PC (training data) | PC (expert data) | Goodness (expert data) |\n|---|---|---|---|---|\n"
        );
        for r in &self.reports {
            out.push_str(&format!(
                "| {} | {:.2} | {} | {} | {:.3} |\n",
                r.reward_source.name(),
                r.performance,
                fmt(r.pearson_on_train),
                fmt(r.pearson_on_expert),
                r.goodness_on_expert
            ));
        }
        out
    }
}

pub fn analyze(args: &AnalyzeArgs) -> Result<Outcome> {
    let out = &args.out;
    let gt_path = or_default(&args.gt, out, GT_FILE);
    let methods: Vec<RewardArg> = if args.methods.is_empty() {
        RewardArg::ALL
            .into_iter()
            .filter(|r| Method::Reward(*r).agent_file(out).is_file())
            .collect()
    } else {
        args.methods.clone()
    };
    if methods.is_empty() {
        return Err(CliError::Dependency {
            path: Method::Reward(RewardArg::Trofi).agent_file(out),
            command: "train-policy",
        });
    }
    let dataset = load(&or_default(&args.dataset, out, DATASET_FILE), "gen-data")?;
    let expert = match &args.expert {
        Some(p) => load(p, "gen-data --tier expert")?,
        None => {
            let e = generate_dataset(&dataset.spec(), Tier::Expert, args.expert_n, args.seed)?;
            save_dataset(&e, &out.join(EXPERT_FILE))?;
            e
        }
    };
    expert.require_labeled("expert dataset")?;
    if expert.env != dataset.env {
        return Err(Error::Config(format!("expert data is for {}, dataset is {}", expert.env, dataset.env)).into());
    }
    let mut reports = Vec::new();
    for r in methods {
        let agent: Agent = read_json(&Method::Reward(r).agent_file(out), "train-policy")?;
        let train = load(&labeled_file(out, r, &gt_path), "train-policy")?;
        let expert_r = expert_for(out, &expert, r, args.seed)?;
        let config = AnalysisConfig {
            gamma: agent.config.gamma,
            goodness_actions: args.goodness_actions,
            n_states: args.n_states,
            eval_episodes: args.episodes,
            seed: args.seed,
        };
        reports.push(build_report(&agent, &train, &expert_r, reward_source(r), &config)?);
    }
    let report = ComparativeReport {
        env: dataset.env,
        reports,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    let table = report.to_table();
    fs::write(out.join(REPORT_TABLE_FILE), &table)?;
    Ok(Outcome {
        key: String::new(),
        metrics: serde_json::to_value(&report.reports.iter().map(|r| (r.reward_source.name(), r.performance)).collect::<Vec<_>>())?,
        summary: table,
    })
}

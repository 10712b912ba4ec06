//! The full experiment: one shared dataset, then per seed a TROFI chain
//! for every ranked fraction (and perturbed variant) plus the baselines,
//! each evaluated after training.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::args::{
    GenDataArgs, LabelArgs, Method, MethodArg, PipelineArgs, RankArgs, RewardArg, SourceArg,
    TrainPolicyArgs, TrainRewardArgs, DEFAULT_EVAL_SEED,
};
use crate::commands::{self, Outcome, DATASET_FILE, GT_FILE};
use crate::error::{CliError, Result};
use crate::manifest::{artifact_hashes, manifest_path, RunManifest, StageRecord};

pub const RESULTS_FILE: &str = "results.json";
pub const RESULTS_TABLE_FILE: &str = "results.md";

/// One TROFI configuration: which share of trajectories is ranked and
/// whether the oracle order is corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrofiVariant {
    pub fraction: f64,
    pub swap_fraction: Option<f64>,
}

fn percent(x: f64) -> String {
    let p = x * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round())
    } else {
        format!("{p}")
    }
}

impl TrofiVariant {
    pub fn label(&self) -> String {
        match self.swap_fraction {
            None => format!("TROFI-{}%", percent(self.fraction)),
            Some(s) => format!("TROFI-{}% ({}% swapped)", percent(self.fraction), percent(s)),
        }
    }

    pub fn dir_name(&self) -> String {
        match self.swap_fraction {
            None => format!("trofi-{}", percent(self.fraction)),
            Some(s) => format!("trofi-{}-swap{}", percent(self.fraction), percent(s)),
        }
    }
}

pub fn baseline_label(m: MethodArg) -> &'static str {
    match m {
        MethodArg::Trofi => "TROFI",
        MethodArg::Gt => "GT",
        MethodArg::Constant => "Constant",
        MethodArg::Random => "Random",
        MethodArg::Transformed => "Transformed",
        MethodArg::Bc => "BC",
    }
}

pub fn variants(args: &PipelineArgs) -> Vec<TrofiVariant> {
    let mut out: Vec<TrofiVariant> = args
        .fractions
        .iter()
        .map(|&fraction| TrofiVariant {
            fraction,
            swap_fraction: None,
        })
        .collect();
    if let Some(swap) = args.perturb {
        let fractions = args.perturb_fractions.clone().unwrap_or_else(|| args.fractions.clone());
        out.extend(fractions.into_iter().map(|fraction| TrofiVariant {
            fraction,
            swap_fraction: Some(swap),
        }));
    }
    out
}

/// Score of one method on one seed, or why it is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub normalized_score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub index: usize,
    pub seed: u64,
    pub scores: Vec<MethodScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub mean: Option<f64>,
    /// Population standard deviation over completed seeds.
    pub std: Option<f64>,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResults {
    pub env: String,
    pub tier: String,
    pub base_seed: u64,
    pub eval_episodes: usize,
    pub runs: Vec<SeedRun>,
    pub rows: Vec<ResultRow>,
}

impl PipelineResults {
    pub fn row(&self, method: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn mean(&self, method: &str) -> Option<f64> {
        self.row(method).and_then(|r| r.mean)
    }

    /// Per-seed scores of `method`, in seed order; `None` where it failed.
    pub fn scores(&self, method: &str) -> Vec<Option<f64>> {
        self.runs
            .iter()
            .map(|run| {
                run.scores
                    .iter()
                    .find(|s| s.method == method)
                    .and_then(|s| s.normalized_score)
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let column = format!("{}-{}", self.env, self.tier);
        let mut out = format!(
            "# Normalized score\n\n{} seeds from base seed {}, {} evaluation episodes each; mean ± std over seeds.\n\n",
            self.runs.len(),
            self.base_seed,
            self.eval_episodes
        );
        out.push_str(&format!("| method | {column} |\n|---|---|\n"));
        for row in &self.rows {
            let cell = match (row.mean, row.std) {
                (Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
                _ => "n/a".into(),
            };
            let marker = if row.failed > 0 {
                format!(" ({} of {} seeds failed)", row.failed, row.failed + row.completed)
            } else {
                String::new()
            };
            out.push_str(&format!("| {} | {cell}{marker} |\n", row.method));
        }
        out.push_str("\n## Per seed\n\n| method |");
        for run in &self.runs {
            out.push_str(&format!(" seed {} |", run.seed));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.runs.len()));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("| {} |", row.method));
            for s in self.scores(&row.method) {
                match s {
                    Some(v) => out.push_str(&format!(" {v:.1} |")),
                    None => out.push_str(" failed |"),
                }
            }
            out.push('\n');
        }
        let failures: Vec<String> = self
            .runs
            .iter()
            .flat_map(|run| {
                run.scores.iter().filter_map(move |s| {
                    s.error
                        .as_ref()
                        .map(|e| format!("- seed {}, {}: {e}", run.seed, s.method))
                })
            })
            .collect();
        if !failures.is_empty() {
            out.push_str("\n## Failures\n\n");
            out.push_str(&failures.join("\n"));
            out.push('\n');
        }
        out
    }
}

/// Mean and population std of the completed seeds of each method, in
/// `methods` order.
pub fn aggregate(methods: &[String], runs: &[SeedRun]) -> Vec<ResultRow> {
    methods
        .iter()
        .map(|m| {
            let mut scores = Vec::new();
            let mut failed = 0;
            for run in runs {
                match run.scores.iter().find(|s| &s.method == m).and_then(|s| s.normalized_score) {
                    Some(v) => scores.push(v),
                    None => failed += 1,
                }
            }
            let (mean, std) = if scores.is_empty() {
                (None, None)
            } else {
                let n = scores.len() as f64;
                let mean = scores.iter().sum::<f64>() / n;
                let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
                (Some(mean), Some(var.sqrt()))
            };
            ResultRow {
                method: m.clone(),
                mean,
                std,
                completed: scores.len(),
                failed,
            }
        })
        .collect()
}

struct Recorder {
    stages: Vec<StageRecord>,
}

impl Recorder {
    fn run<A: Serialize>(
        &mut self,
        command: &str,
        key: &str,
        args: &A,
        f: impl FnOnce(&A) -> Result<Outcome>,
    ) -> Result<Outcome> {
        let start = Instant::now();
        let outcome = f(args)?;
        self.stages.push(StageRecord {
            command: command.into(),
            key: if outcome.key.is_empty() {
                key.into()
            } else {
                format!("{key}/{}", outcome.key)
            },
            config: serde_json::to_value(args)?,
            metrics: outcome.metrics.clone(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        Ok(outcome)
    }

    fn evaluate(&mut self, key: &str, dir: &Path, method: Method, episodes: usize, seed: u64) -> Result<f64> {
        let start = Instant::now();
        let result = commands::evaluate_policy(dir, method, episodes, seed)?;
        self.stages.push(StageRecord {
            command: "evaluate".into(),
            key: format!("{key}/{}", method.name()),
            config: serde_json::json!({ "out": dir, "method": method.name(), "episodes": episodes, "seed": seed }),
            metrics: serde_json::json!({ "mean_return": result.mean, "normalized_score": result.normalized_score }),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        Ok(result.normalized_score)
    }
}

struct SeedContext<'a> {
    args: &'a PipelineArgs,
    seed: u64,
    dataset: PathBuf,
    gt: PathBuf,
    dir: PathBuf,
}

impl SeedContext<'_> {
    fn policy_args(&self, out: &Path, reward: RewardArg, bc: bool) -> TrainPolicyArgs {
        TrainPolicyArgs {
            reward,
            bc,
            policy: self.args.policy.clone(),
            seed: self.seed,
            dataset: Some(self.dataset.clone()),
            gt: Some(self.gt.clone()),
            out: out.to_path_buf(),
        }
    }

    fn eval_seed(&self) -> u64 {
        DEFAULT_EVAL_SEED.wrapping_add(self.seed)
    }

    fn trofi(&self, rec: &mut Recorder, v: &TrofiVariant) -> Result<(PathBuf, f64)> {
        let dir = self.dir.join(v.dir_name());
        let key = format!("seed-{}/{}", self.seed, v.dir_name());
        let rank_args = RankArgs {
            fraction: v.fraction,
            source: if v.swap_fraction.is_some() {
                SourceArg::Perturbed
            } else {
                SourceArg::Oracle
            },
            perturb: v.swap_fraction,
            input: None,
            seed: self.seed,
            dataset: Some(self.dataset.clone()),
            gt: Some(self.gt.clone()),
            out: dir.clone(),
        };
        rec.run("rank", &key, &rank_args, commands::rank)?;
        let reward_args = TrainRewardArgs {
            reward: self.args.reward.clone(),
            seed: self.seed,
            dataset: Some(self.dataset.clone()),
            out: dir.clone(),
        };
        rec.run("train-reward", &key, &reward_args, commands::train_reward)?;
        let label_args = LabelArgs {
            dataset: Some(self.dataset.clone()),
            out: dir.clone(),
        };
        rec.run("label", &key, &label_args, commands::label)?;
        rec.run(
            "train-policy",
            &key,
            &self.policy_args(&dir, RewardArg::Trofi, false),
            commands::train_policy,
        )?;
        let score = rec.evaluate(&key, &dir, Method::Reward(RewardArg::Trofi), self.args.episodes, self.eval_seed())?;
        Ok((dir, score))
    }

    fn baseline(&self, rec: &mut Recorder, m: MethodArg, trofi_dir: Option<&Path>) -> Result<f64> {
        let method = Method::from(m);
        let (dir, key) = match method {
            Method::Reward(RewardArg::Transformed) => {
                let dir = trofi_dir
                    .ok_or_else(|| CliError::Usage("the transformed baseline needs a successful TROFI run".into()))?;
                let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                (dir.to_path_buf(), format!("seed-{}/{name}", self.seed))
            }
            _ => (self.dir.join("baselines"), format!("seed-{}/baselines", self.seed)),
        };
        let (reward, bc) = match method {
            Method::Bc => (RewardArg::Gt, true),
            Method::Reward(r) => (r, false),
        };
        rec.run("train-policy", &key, &self.policy_args(&dir, reward, bc), commands::train_policy)?;
        rec.evaluate(&key, &dir, method, self.args.episodes, self.eval_seed())
    }
}

fn score_entry(method: String, result: Result<f64>) -> MethodScore {
    match result {
        Ok(v) => MethodScore {
            method,
            normalized_score: Some(v),
            error: None,
        },
        Err(e) => MethodScore {
            method,
            normalized_score: None,
            error: Some(e.to_string()),
        },
    }
}

/// Runs the whole experiment into `args.out` and writes `results.json`,
/// `results.md` and the manifest. Failures of individual methods are
/// recorded in the results rather than aborting the run.
pub fn run_pipeline(args: &PipelineArgs) -> Result<PipelineResults> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if args.baselines.contains(&MethodArg::Trofi) {
        return Err(CliError::Usage("TROFI rows come from --fractions, not --baselines".into()));
    }
    if args.fractions.is_empty() {
        return Err(CliError::Usage("--fractions needs at least one value".into()));
    }
    args.reward.resolve(args.seed).validate()?;
    args.policy.resolve(args.seed).validate()?;
    let out = &args.out;
    fs::create_dir_all(out)?;
    let mut rec = Recorder { stages: Vec::new() };
    let gen = GenDataArgs {
        env: args.env,
        tier: args.tier,
        n: args.n,
        seed: args.seed,
        out: out.clone(),
    };
    rec.run("gen-data", "", &gen, commands::gen_data)?;

    let variants = variants(args);
    let mut methods: Vec<String> = variants.iter().map(TrofiVariant::label).collect();
    methods.extend(args.baselines.iter().map(|&m| baseline_label(m).to_string()));

    let mut runs = Vec::new();
    for index in 0..args.seeds {
        let seed = args.seed.wrapping_add(index as u64);
        let ctx = SeedContext {
            args,
            seed,
            dataset: out.join(DATASET_FILE),
            gt: out.join(GT_FILE),
            dir: out.join(format!("seed-{seed}")),
        };
        let mut scores = Vec::new();
        let mut first_trofi_dir = None;
        for (i, v) in variants.iter().enumerate() {
            let result = ctx.trofi(&mut rec, v).map(|(dir, score)| {
                if i == 0 {
                    first_trofi_dir = Some(dir);
                }
                score
            });
            report_progress(seed, &v.label(), &result);
            scores.push(score_entry(v.label(), result));
        }
        for &m in &args.baselines {
            let result = ctx.baseline(&mut rec, m, first_trofi_dir.as_deref());
            report_progress(seed, baseline_label(m), &result);
            scores.push(score_entry(baseline_label(m).into(), result));
        }
        runs.push(SeedRun { index, seed, scores });
    }

    let results = PipelineResults {
        env: args.env.to_string(),
        tier: args.tier.to_string(),
        base_seed: args.seed,
        eval_episodes: args.episodes,
        rows: aggregate(&methods, &runs),
        runs,
    };
    commands::write_json(&out.join(RESULTS_FILE), &results)?;
    fs::write(out.join(RESULTS_TABLE_FILE), results.to_markdown())?;
    rec.stages.push(StageRecord {
        command: "pipeline".into(),
        key: String::new(),
        config: serde_json::to_value(args)?,
        metrics: serde_json::to_value(&results.rows)?,
        wall_seconds: rec.stages.iter().map(|s| s.wall_seconds).sum(),
    });
    let manifest = RunManifest {
        stages: rec.stages,
        artifacts: artifact_hashes(out)?,
        ..RunManifest::default()
    };
    fs::write(manifest_path(out), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(results)
}

fn report_progress(seed: u64, method: &str, result: &Result<f64>) {
    match result {
        Ok(v) => eprintln!("seed {seed}: {method}: {v:.1}"),
        Err(e) => eprintln!("seed {seed}: {method}: failed: {e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seed: u64, scores: &[(&str, Option<f64>)]) -> SeedRun {
        SeedRun {
            index: seed as usize,
            seed,
            scores: scores
                .iter()
                .map(|(m, s)| MethodScore {
                    method: m.to_string(),
                    normalized_score: *s,
                    error: s.is_none().then(|| "boom".to_string()),
                })
                .collect(),
        }
    }

    #[test]
    fn aggregate_uses_per_seed_means() {
        let methods = vec!["A".to_string(), "B".to_string()];
        let runs = vec![
            run(0, &[("A", Some(90.0)), ("B", Some(10.0))]),
            run(1, &[("A", Some(100.0)), ("B", None)]),
            run(2, &[("A", Some(80.0)), ("B", Some(30.0))]),
        ];
        let rows = aggregate(&methods, &runs);
        assert_eq!(rows[0].mean, Some(90.0));
        assert!((rows[0].std.unwrap() - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((rows[0].completed, rows[0].failed), (3, 0));
        assert_eq!(rows[1].mean, Some(20.0));
        assert_eq!((rows[1].completed, rows[1].failed), (2, 1));
    }

    #[test]
    fn markdown_rows_and_failure_markers() {
        let methods = vec!["TROFI-100%".to_string(), "GT".to_string(), "BC".to_string()];
        let runs = vec![
            run(0, &[("TROFI-100%", Some(95.0)), ("GT", Some(100.0)), ("BC", None)]),
            run(1, &[("TROFI-100%", Some(97.0)), ("GT", Some(102.0)), ("BC", None)]),
        ];
        let results = PipelineResults {
            env: "lineworld".into(),
            tier: "medium".into(),
            base_seed: 0,
            eval_episodes: 100,
            rows: aggregate(&methods, &runs),
            runs,
        };
        let md = results.to_markdown();
        assert!(md.contains("| method | lineworld-medium |"));
        assert!(md.contains("| TROFI-100% | 96.0 ± 1.0 |"));
        assert!(md.contains("| GT | 101.0 ± 1.0 |"));
        assert!(md.contains("| BC | n/a (2 of 2 seeds failed) |"));
        assert!(md.contains("- seed 1, BC: boom"));
    }

    #[test]
    fn variant_labels() {
        let v = TrofiVariant {
            fraction: 0.05,
            swap_fraction: None,
        };
        assert_eq!(v.label(), "TROFI-5%");
        assert_eq!(v.dir_name(), "trofi-5");
        let p = TrofiVariant {
            fraction: 0.1,
            swap_fraction: Some(0.2),
        };
        assert_eq!(p.label(), "TROFI-10% (20% swapped)");
        assert_eq!(p.dir_name(), "trofi-10-swap20");
        assert_eq!(
            TrofiVariant {
                fraction: 1.0,
                swap_fraction: None
            }
            .label(),
            "TROFI-100%"
        );
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 2 3`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{concatenate, Array1, Array2, Axis};
use trofi_cli::args::{
    GenDataArgs, LabelArgs, MethodArg, PipelineArgs, PolicyOverrides, RankArgs, RewardArg, RewardOverrides,
    SourceArg, TrainPolicyArgs, TrainRewardArgs,
};
use trofi_cli::commands::{self, ComparativeReport};
use trofi_cli::manifest::{list_files, load_manifest};
use trofi_cli::pipeline::{run_pipeline, PipelineResults};
use trofi_core::analysis::{
    discounted_return_series, fit_affine_to_model, goodness, pearson_correlation, transform_rewards, ActionValue,
    AffineTransform, AnalysisConfig,
};
use trofi_core::dataset::{generate_dataset, NormStats, OfflineDataset, Tier, Trajectory, Transition};
use trofi_core::envs::{EnvKind, EnvSpec};
use trofi_core::nn::{Activation, Gradients, Mlp, Rng};
use trofi_core::policy::{actor_objective, critic_mse, lambda_norm, Actor};
use trofi_core::ranking::{oracle_rank, subsample_trajectories};
use trofi_core::reward_model::{pair_loss, train_reward, trex_loss, RewardModel, RewardTrainConfig, SnippetPair};

// Criterion 1
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_ABS_FLOOR: f64 = 1e-6;
const GRADIENT_BUDGET: Duration = Duration::from_secs(10);
// Criteria 2, 3, 8
const LOSS_TOL: f64 = 1e-9;
const LAMBDA_TOL: f64 = 1e-12;
const DISCOUNT_TOL: f64 = 1e-9;
const PEARSON_TOL: f64 = 1e-12;
const GOODNESS_SIGMAS: f64 = 3.0;
// Criterion 4
const MIN_HOLDOUT_ACCURACY: f64 = 0.9;
const REWARD_BUDGET: Duration = Duration::from_secs(120);
// Criteria 5 to 7
const BC_SLACK: f64 = 5.0;
const GT_GAP: f64 = 15.0;
const FRACTION_GAP: f64 = 15.0;
const NOISE_DEGRADATION: f64 = 15.0;
const PIPELINE_BUDGET: Duration = Duration::from_secs(15 * 60);
// Criterion 9
const AFFINE_TOL: f64 = 0.05;

const SEEDS: usize = 5;
const TROFI_FULL: &str = "TROFI-100%";
const TROFI_SMALL: &str = "TROFI-5%";
const TROFI_TEN: &str = "TROFI-10%";
const TROFI_TEN_NOISY: &str = "TROFI-10% (20% swapped)";

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- criterion 1

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_ABS_FLOOR)
}

fn numeric_gradient(net: &Mlp, objective: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    (0..net.num_parameters())
        .map(|i| {
            let mut plus = net.clone();
            *plus.parameters_mut().nth(i).unwrap() += FD_STEP;
            let mut minus = net.clone();
            *minus.parameters_mut().nth(i).unwrap() -= FD_STEP;
            (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn worst_error(analytic: &Gradients, numeric: &[f64]) -> f64 {
    let analytic: Vec<f64> = analytic.iter().collect();
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Random biases keep pre-activations off the ReLU kink.
fn test_network(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Mlp {
    let mut net = Mlp::init(sizes, hidden, output, rng).unwrap();
    for layer in net.layers_mut() {
        layer.bias.mapv_inplace(|_| rng.uniform(-0.5, 0.5));
    }
    net
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.uniform(-1.0, 1.0))
}

fn identity_stats(dim: usize) -> NormStats {
    NormStats {
        mean: vec![0.0; dim],
        std: vec![1.0; dim],
    }
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst = BTreeMap::new();

    let mut mlp = 0.0f64;
    for (sizes, hidden, output) in [
        (vec![4, 16, 16, 1], Activation::Relu, Activation::Identity),
        (vec![3, 16, 2], Activation::Tanh, Activation::Tanh),
        (vec![5, 16, 16, 3], Activation::Relu, Activation::Tanh),
    ] {
        let net = test_network(&sizes, hidden, output, &mut rng);
        let x = random_matrix(6, sizes[0], &mut rng);
        let upstream = random_matrix(6, *sizes.last().unwrap(), &mut rng);
        let objective = |m: &Mlp| (&m.forward(x.view()).unwrap() * &upstream).sum();
        let back = net.backward(&net.forward_trace(x.view()).unwrap(), upstream.view()).unwrap();
        mlp = mlp.max(worst_error(&back.params, &numeric_gradient(&net, objective)));
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let (mut plus, mut minus) = (x.clone(), x.clone());
                plus[[r, c]] += FD_STEP;
                minus[[r, c]] -= FD_STEP;
                let at = |input: &Array2<f64>| (&net.forward(input.view()).unwrap() * &upstream).sum();
                let numeric = (at(&plus) - at(&minus)) / (2.0 * FD_STEP);
                mlp = mlp.max(relative_error(back.input[[r, c]], numeric));
            }
        }
    }
    worst.insert("mlp", mlp);

    let net = test_network(&[3, 16, 16, 1], Activation::Relu, Activation::Identity, &mut rng);
    let model = RewardModel::new(EnvKind::LineWorld, net, identity_stats(3)).unwrap();
    let pairs: Vec<SnippetPair> = (0..4)
        .map(|i| SnippetPair {
            low: random_matrix(5, 3, &mut rng),
            high: random_matrix(5, 3, &mut rng),
            low_id: i,
            high_id: i + 10,
            low_start: 0,
            high_start: 0,
        })
        .collect();
    let direct = |m: &Mlp| {
        pairs
            .iter()
            .map(|p| {
                let low = m.forward(p.low.view()).unwrap().sum();
                let high = m.forward(p.high.view()).unwrap().sum();
                -(high.exp() / (low.exp() + high.exp())).ln()
            })
            .sum::<f64>()
            / pairs.len() as f64
    };
    let (loss, grads) = trex_loss(&model, &pairs).unwrap();
    if (loss - direct(&model.net)).abs() > 1e-12 {
        return Err(format!("ranking loss value {loss} differs from direct {}", direct(&model.net)));
    }
    worst.insert("ranking loss", worst_error(&grads, &numeric_gradient(&model.net, direct)));

    let critic = test_network(&[3, 16, 16, 1], Activation::Relu, Activation::Identity, &mut rng);
    let inputs = random_matrix(8, 3, &mut rng);
    let targets = Array1::from_shape_fn(8, |_| rng.uniform(-2.0, 2.0));
    let mse = |m: &Mlp| {
        let q = m.forward(inputs.view()).unwrap();
        (0..8).map(|i| (q[[i, 0]] - targets[i]).powi(2)).sum::<f64>() / 8.0
    };
    let (_, grads) = critic_mse(&critic, inputs.view(), &targets).unwrap();
    worst.insert("critic mse", worst_error(&grads, &numeric_gradient(&critic, mse)));

    let env = EnvSpec::new(EnvKind::LineWorld);
    let mut actor = Actor::init(&env, identity_stats(2), &[16, 16], &mut rng).unwrap();
    actor.net = test_network(&[2, 16, 16, 1], Activation::Relu, Activation::Tanh, &mut rng);
    let critic = test_network(&[3, 16, 16, 1], Activation::Relu, Activation::Identity, &mut rng);
    let states = random_matrix(8, 2, &mut rng);
    let actions = random_matrix(8, 1, &mut rng);
    let fixed = actor_objective(&actor, &critic, states.view(), actions.view(), 2.5, None).unwrap();
    let objective = |net: &Mlp| {
        let pi = net.forward(states.view()).unwrap();
        let x = concatenate(Axis(1), &[states.view(), pi.view()]).unwrap();
        let q = critic.forward(x.view()).unwrap();
        -fixed.lambda * q.sum() / 8.0 + (&pi - &actions).mapv(|d| d * d).sum() / 8.0
    };
    worst.insert("actor objective", worst_error(&fixed.gradients, &numeric_gradient(&actor.net, objective)));

    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let detail = format!(
        "max relative error {max:.2e} (tol {FD_REL_TOL:e}) over {:?}, {:.1}s",
        worst.keys().collect::<Vec<_>>(),
        elapsed.as_secs_f64()
    );
    ensure(max <= FD_REL_TOL && elapsed < GRADIENT_BUDGET, detail)
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Check {
    let ln2 = std::f64::consts::LN_2;
    let equal = pair_loss(3.7, 3.7);
    let hand = pair_loss(1.0, 2.0);
    let hand_expected = (1.0 + (-1.0f64).exp()).ln();

    // Shifting every per-state reward by c adds c·L to both sums of
    // equal-length snippets.
    let mut rng = Rng::new(2);
    let net = test_network(&[3, 16, 1], Activation::Tanh, Activation::Identity, &mut rng);
    let model = RewardModel::new(EnvKind::LineWorld, net, identity_stats(3)).unwrap();
    let pairs: Vec<SnippetPair> = (0..6)
        .map(|i| SnippetPair {
            low: random_matrix(7, 3, &mut rng),
            high: random_matrix(7, 3, &mut rng),
            low_id: i,
            high_id: i + 10,
            low_start: 0,
            high_start: 0,
        })
        .collect();
    let (base, _) = trex_loss(&model, &pairs).unwrap();
    let mut shift_err = 0.0f64;
    for c in [-2.0, 0.5, 3.0] {
        let mut shifted = model.clone();
        let last = shifted.net.layers_mut().last_mut().unwrap();
        last.bias.mapv_inplace(|b| b + c);
        let (loss, _) = trex_loss(&shifted, &pairs).unwrap();
        shift_err = shift_err.max((loss - base).abs());
        shift_err = shift_err.max((pair_loss(1.3 + 7.0 * c, 0.4 + 7.0 * c) - pair_loss(1.3, 0.4)).abs());
    }
    let detail = format!(
        "equal sums {:.1e} from ln 2, shift invariance {shift_err:.1e}, hand case {:.1e} (tol {LOSS_TOL:e})",
        (equal - ln2).abs(),
        (hand - hand_expected).abs()
    );
    ensure(
        (equal - ln2).abs() <= LOSS_TOL && shift_err <= LOSS_TOL && (hand - hand_expected).abs() <= LOSS_TOL,
        detail,
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Check {
    let q = [5.0, -5.0, 7.0, -3.0];
    let lambda = lambda_norm(&q, 2.5).map_err(|e| e.to_string())?;
    let mut homogeneity = 0.0f64;
    let mut rng = Rng::new(3);
    let base: Vec<f64> = (0..50).map(|_| rng.uniform(-20.0, 20.0)).collect();
    let l = lambda_norm(&base, 2.5).map_err(|e| e.to_string())?;
    for k in [0.1, 10.0] {
        let scaled: Vec<f64> = base.iter().map(|x| k * x).collect();
        let lk = lambda_norm(&scaled, 2.5).map_err(|e| e.to_string())?;
        homogeneity = homogeneity.max((lk - l / k).abs() / (l / k));
    }
    let detail = format!("lambda(2.5, mean|Q| = 5) = {lambda}, homogeneity rel error {homogeneity:.1e}");
    ensure(lambda == 0.5 && homogeneity <= LAMBDA_TOL, detail)
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Check {
    let start = Instant::now();
    let gt = generate_dataset(&EnvSpec::new(EnvKind::LineWorld), Tier::Medium, 10_000, 0).map_err(|e| e.to_string())?;
    let mut accuracies = Vec::new();
    for seed in 0..SEEDS as u64 {
        let trajectories = subsample_trajectories(&gt, 0.5, seed).map_err(|e| e.to_string())?;
        let ranked = oracle_rank(&trajectories, gt.env, &gt.content_hash()).map_err(|e| e.to_string())?;
        let config = RewardTrainConfig {
            seed,
            ..RewardTrainConfig::default()
        };
        let (_, log) = train_reward(&ranked, &gt, &config).map_err(|e| e.to_string())?;
        accuracies.push(log.final_holdout_accuracy().ok_or("no held-out trajectories")?);
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "held-out pairwise accuracy per seed {:?} (min {MIN_HOLDOUT_ACCURACY}), {:.0}s (budget {}s)",
        accuracies.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
        elapsed.as_secs_f64(),
        REWARD_BUDGET.as_secs()
    );
    ensure(
        accuracies.iter().all(|&a| a >= MIN_HOLDOUT_ACCURACY) && elapsed < REWARD_BUDGET,
        detail,
    )
}

// ------------------------------------------------------------ criteria 5 to 7

fn pipeline_args(out: &Path) -> PipelineArgs {
    PipelineArgs {
        env: EnvKind::LineWorld,
        tier: Tier::Medium,
        n: 10_000,
        seed: 0,
        seeds: SEEDS,
        fractions: vec![1.0, 0.1, 0.05],
        perturb: Some(0.2),
        perturb_fractions: Some(vec![0.1]),
        baselines: vec![MethodArg::Gt, MethodArg::Constant, MethodArg::Random, MethodArg::Bc],
        episodes: 100,
        reward: RewardOverrides::default(),
        policy: PolicyOverrides::default(),
        out: out.to_path_buf(),
    }
}

struct PipelineRun {
    dir: tempfile::TempDir,
    results: Result<PipelineResults, String>,
    elapsed: Duration,
}

static PIPELINE: OnceLock<PipelineRun> = OnceLock::new();

fn pipeline() -> &'static PipelineRun {
    PIPELINE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("temp dir");
        let start = Instant::now();
        let results = run_pipeline(&pipeline_args(dir.path())).map_err(|e| e.to_string());
        PipelineRun {
            dir,
            results,
            elapsed: start.elapsed(),
        }
    })
}

fn complete_mean(results: &PipelineResults, method: &str) -> Result<f64, String> {
    let row = results.row(method).ok_or_else(|| format!("no {method} row"))?;
    if row.failed > 0 {
        return Err(format!("{method} failed on {} seeds", row.failed));
    }
    row.mean.ok_or_else(|| format!("{method} has no score"))
}

fn criterion_5() -> Check {
    let run = pipeline();
    let results = run.results.as_ref().map_err(Clone::clone)?;
    let trofi = complete_mean(results, TROFI_FULL)?;
    let gt = complete_mean(results, "GT")?;
    let constant = complete_mean(results, "Constant")?;
    let random = complete_mean(results, "Random")?;
    let bc = complete_mean(results, "BC")?;
    let detail = format!(
        "TROFI {trofi:.1}, GT {gt:.1}, Constant {constant:.1}, Random {random:.1}, BC {bc:.1}; \
         full pipeline {:.0}s (budget {}s)",
        run.elapsed.as_secs_f64(),
        PIPELINE_BUDGET.as_secs()
    );
    ensure(
        trofi > random
            && trofi > constant
            && trofi >= bc - BC_SLACK
            && (gt - trofi).abs() <= GT_GAP
            && run.elapsed < PIPELINE_BUDGET,
        detail,
    )
}

fn criterion_6() -> Check {
    let results = pipeline().results.as_ref().map_err(Clone::clone)?;
    let full = complete_mean(results, TROFI_FULL)?;
    let small = complete_mean(results, TROFI_SMALL)?;
    let detail = format!("TROFI-5% {small:.1} vs TROFI-100% {full:.1} (max gap {FRACTION_GAP})");
    ensure((full - small).abs() <= FRACTION_GAP, detail)
}

fn criterion_7() -> Check {
    let results = pipeline().results.as_ref().map_err(Clone::clone)?;
    let clean = complete_mean(results, TROFI_TEN)?;
    let noisy = complete_mean(results, TROFI_TEN_NOISY)?;
    let detail = format!(
        "TROFI-10% oracle {clean:.1}, 20% swapped {noisy:.1}, degradation {:.1} (max {NOISE_DEGRADATION})",
        clean - noisy
    );
    ensure(clean - noisy <= NOISE_DEGRADATION, detail)
}

// ---------------------------------------------------------------- criterion 8

fn trajectory(rewards: &[f64]) -> Trajectory {
    Trajectory {
        episode_id: 0,
        transitions: rewards
            .iter()
            .enumerate()
            .map(|(t, &r)| Transition {
                episode_id: 0,
                step_index: t,
                state: vec![t as f64, 0.0],
                action: vec![0.0],
                next_state: vec![t as f64 + 1.0, 0.0],
                reward: Some(r),
            })
            .collect(),
        episodic_return: Some(rewards.iter().sum()),
    }
}

fn pearson_by_definition(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
}

/// `-|a - a* - shift|` on LineWorld, with a* looked up by state.
struct ShiftedPeakCritic {
    expert: std::collections::HashMap<Vec<u64>, f64>,
    shift: f64,
}

impl ActionValue for ShiftedPeakCritic {
    fn action_values(&self, states: &Array2<f64>, actions: &Array2<f64>) -> trofi_core::Result<Vec<f64>> {
        Ok(states
            .rows()
            .into_iter()
            .zip(actions.rows())
            .map(|(s, a)| {
                let star = self.expert[&s.iter().map(|v| v.to_bits()).collect::<Vec<_>>()];
                -(a[0] - star - self.shift).abs()
            })
            .collect())
    }
}

fn criterion_8() -> Check {
    let mut rng = Rng::new(8);
    let mut discount_err = 0.0f64;
    for len in [1, 2, 17, 100] {
        let rewards: Vec<f64> = (0..len).map(|_| rng.uniform(-3.0, 3.0)).collect();
        for gamma in [0.0, 0.5, 0.9, 0.99, 1.0] {
            let series = discounted_return_series(&trajectory(&rewards), gamma).map_err(|e| e.to_string())?;
            for t in 0..len {
                let direct: f64 = (t..len).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum();
                discount_err = discount_err.max((series[t] - direct).abs());
            }
        }
    }

    let mut pearson_err = 0.0f64;
    for _ in 0..50 {
        let xs: Vec<f64> = (0..30).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.3 * x + rng.uniform(-2.0, 2.0)).collect();
        let got = pearson_correlation(&xs, &ys).map_err(|e| e.to_string())?;
        pearson_err = pearson_err.max((got - pearson_by_definition(&xs, &ys)).abs());
    }
    let hand = pearson_correlation(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).map_err(|e| e.to_string())?;

    let env = EnvSpec::new(EnvKind::LineWorld);
    let expert = generate_dataset(&env, Tier::Expert, 500, 7).map_err(|e| e.to_string())?;
    let shift = 0.3;
    let critic = ShiftedPeakCritic {
        expert: expert
            .transitions()
            .iter()
            .map(|t| (t.state.iter().map(|v| v.to_bits()).collect(), t.action[0]))
            .collect(),
        shift,
    };
    let config = AnalysisConfig {
        n_states: expert.len(),
        goodness_actions: 32,
        ..Default::default()
    };
    let sampled = goodness(&critic, &expert, &config, &mut Rng::new(2)).map_err(|e| e.to_string())?;
    let grid: Vec<f64> = (0..=4_000).map(|i| -1.0 + i as f64 / 2_000.0).collect();
    let enumerated = expert
        .transitions()
        .iter()
        .map(|t| {
            let star = t.action[0];
            let score = |a: f64| -(a - star - shift).abs();
            grid.iter().filter(|&&a| score(a) < score(star)).count() as f64 / grid.len() as f64
        })
        .sum::<f64>()
        / expert.len() as f64;
    let sigma = (enumerated * (1.0 - enumerated) / (expert.len() * config.goodness_actions) as f64).sqrt();

    let medium = generate_dataset(&env, Tier::Medium, 3_000, 9).map_err(|e| e.to_string())?;
    let order = |ds: &OfflineDataset| -> Result<Vec<u64>, String> {
        let mut t = ds.split_trajectories().map_err(|e| e.to_string())?;
        t.sort_by(|a, b| a.episodic_return.partial_cmp(&b.episodic_return).unwrap().then(a.episode_id.cmp(&b.episode_id)));
        Ok(t.iter().map(|t| t.episode_id).collect())
    };
    let mut order_kept = true;
    for (scale, offset) in [(0.5, 0.0), (3.0, -1.0), (10.0, 4.0)] {
        let transformed = transform_rewards(&medium, AffineTransform { scale, offset }).map_err(|e| e.to_string())?;
        order_kept &= order(&transformed)? == order(&medium)?;
    }

    let detail = format!(
        "discounted {discount_err:.1e} (tol {DISCOUNT_TOL:e}), Pearson {pearson_err:.1e} (tol {PEARSON_TOL:e}), \
         hand case {hand}, Goodness {sampled:.4} vs grid {enumerated:.4} ({:.1} sigma), affine order kept {order_kept}",
        (sampled - enumerated).abs() / sigma
    );
    ensure(
        discount_err <= DISCOUNT_TOL
            && pearson_err <= PEARSON_TOL
            && (hand - 0.8).abs() <= PEARSON_TOL
            && (sampled - enumerated).abs() <= GOODNESS_SIGMAS * sigma
            && order_kept,
        detail,
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Check {
    let gt = generate_dataset(&EnvSpec::new(EnvKind::LineWorld), Tier::Medium, 5_000, 9).map_err(|e| e.to_string())?;
    let r = gt.rewards().unwrap();
    let (scale, offset) = (2.5, -0.7);
    let mut rng = Rng::new(9);
    let model = gt
        .map_rewards(|i, _| scale * r[i] + offset + rng.uniform(-0.02, 0.02))
        .map_err(|e| e.to_string())?;
    let fit = fit_affine_to_model(&gt, &model).map_err(|e| e.to_string())?;
    let fit_ok = (fit.scale - scale).abs() <= AFFINE_TOL && (fit.offset - offset).abs() <= AFFINE_TOL;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().to_path_buf();
    let run = || -> trofi_cli::error::Result<ComparativeReport> {
        commands::gen_data(&GenDataArgs {
            env: EnvKind::LineWorld,
            tier: Tier::Medium,
            n: 10_000,
            seed: 0,
            out: out.clone(),
        })?;
        commands::rank(&RankArgs {
            fraction: 1.0,
            source: SourceArg::Oracle,
            perturb: None,
            input: None,
            seed: 0,
            dataset: None,
            gt: None,
            out: out.clone(),
        })?;
        commands::train_reward(&TrainRewardArgs {
            reward: RewardOverrides::default(),
            seed: 0,
            dataset: None,
            out: out.clone(),
        })?;
        commands::label(&LabelArgs {
            dataset: None,
            out: out.clone(),
        })?;
        for reward in [RewardArg::Trofi, RewardArg::Gt, RewardArg::Transformed] {
            commands::train_policy(&TrainPolicyArgs {
                reward,
                bc: false,
                policy: PolicyOverrides::default(),
                seed: 0,
                dataset: None,
                gt: None,
                out: out.clone(),
            })?;
        }
        commands::analyze(&trofi_cli::args::AnalyzeArgs {
            methods: vec![RewardArg::Trofi, RewardArg::Gt, RewardArg::Transformed],
            expert: None,
            expert_n: 10_000,
            n_states: 1000,
            goodness_actions: 32,
            episodes: 100,
            seed: 0,
            dataset: None,
            gt: None,
            out: out.clone(),
        })?;
        let text = fs::read_to_string(out.join(commands::REPORT_FILE))?;
        Ok(serde_json::from_str(&text)?)
    };
    let report = run().map_err(|e| format!("transformed-reward run failed: {e}"))?;
    let transform: AffineTransform =
        serde_json::from_str(&fs::read_to_string(out.join(commands::TRANSFORM_FILE)).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let rows: Vec<String> = report
        .reports
        .iter()
        .map(|r| {
            format!(
                "{} score {:.1} PC(expert) {} Goodness {:.3}",
                r.reward_source.name(),
                r.performance,
                r.pearson_on_expert.map_or("n/a".into(), |p| format!("{p:.3}")),
                r.goodness_on_expert
            )
        })
        .collect();
    let detail = format!(
        "synthetic fit scale {:.4} offset {:.4} (true {scale}, {offset}, tol {AFFINE_TOL}); \
         fitted GT to TROFI {:.3}x{:+.3}; report: {}",
        fit.scale,
        fit.offset,
        transform.scale,
        transform.offset,
        rows.join("; ")
    );
    ensure(fit_ok && report.reports.len() == 3, detail)
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Check {
    let first = pipeline();
    first.results.as_ref().map_err(Clone::clone)?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(&pipeline_args(second.path())).map_err(|e| e.to_string())?;
    let (a, b) = (first.dir.path(), second.path());
    let files_a = list_files(a).map_err(|e| e.to_string())?;
    let files_b = list_files(b).map_err(|e| e.to_string())?;
    if files_a != files_b {
        return Err(format!("file lists differ ({} vs {} files)", files_a.len(), files_b.len()));
    }
    let mut compared = 0;
    let mut differing = Vec::new();
    for rel in files_a.iter().filter(|f| !f.ends_with("manifest.json")) {
        compared += 1;
        if fs::read(a.join(rel)).map_err(|e| e.to_string())? != fs::read(b.join(rel)).map_err(|e| e.to_string())? {
            differing.push(rel.clone());
        }
    }
    let same_hashes = load_manifest(a).map_err(|e| e.to_string())?.artifacts
        == load_manifest(b).map_err(|e| e.to_string())?.artifacts;
    let detail = format!(
        "{compared} artifacts compared, {} differ {:?}; manifest checksums identical: {same_hashes} \
         (manifest timings excluded)",
        differing.len(),
        differing.iter().take(5).collect::<Vec<_>>()
    );
    ensure(differing.is_empty() && same_hashes, detail)
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Check); 10] = [
        (1, "gradient oracle", criterion_1),
        (2, "ranking-loss identities", criterion_2),
        (3, "lambda identities", criterion_3),
        (4, "reward-model quality", criterion_4),
        (5, "pipeline ordering", criterion_5),
        (6, "ranked-fraction robustness", criterion_6),
        (7, "noisy-ranking robustness", criterion_7),
        (8, "analysis oracles", criterion_8),
        (9, "transformed-reward experiment", criterion_9),
        (10, "pipeline determinism", criterion_10),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if let Some(Ok(results)) = PIPELINE.get().map(|run| &run.results) {
        println!("\n{}", results.to_markdown());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

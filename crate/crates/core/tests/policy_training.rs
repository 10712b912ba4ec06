use trofi_core::dataset::{compute_norm_stats, generate_dataset, OfflineDataset, Tier, Transition};
use trofi_core::envs::{rollout, Action, Controller, EnvKind, EnvSpec, State};
use trofi_core::nn::{adam_step, AdamConfig, AdamState, Rng};
use trofi_core::policy::{bc_objective, evaluate, train_bc, train_policy, Actor, PolicyConfig, TrainingData};
use trofi_core::Result;

struct LinearPolicy;

impl LinearPolicy {
    fn action(features: &[f64]) -> f64 {
        0.3 * (1.0 - features[0]) - 0.4 * features[1]
    }
}

impl Controller for LinearPolicy {
    fn act(&self, _: &EnvSpec, state: &State, _: &mut Rng) -> Result<Action> {
        Ok(Action::new(vec![Self::action(&state.features)]))
    }
}

fn linear_policy_dataset(episodes: u64) -> OfflineDataset {
    let env = EnvSpec::new(EnvKind::LineWorld);
    let mut transitions = Vec::new();
    for e in 0..episodes {
        let steps = rollout(&env, &LinearPolicy, 1_000 + e, &mut Rng::new(e)).unwrap();
        transitions.extend(steps.into_iter().enumerate().map(|(t, s)| Transition {
            episode_id: e,
            step_index: t,
            state: s.state.features,
            action: s.action.values,
            next_state: s.next_state.features,
            reward: Some(s.reward),
        }));
    }
    OfflineDataset::new(EnvKind::LineWorld, Tier::Expert, transitions, None).unwrap()
}

#[test]
fn bc_recovers_a_linear_policy() {
    let ds = linear_policy_dataset(40);
    let config = PolicyConfig {
        updates: 4_000,
        actor_learning_rate: 1e-3,
        ..Default::default()
    };
    let (actor, log) = train_bc(&ds, &config).unwrap();
    assert!(log.last().unwrap().loss < log.first().unwrap().loss);
    let errors: Vec<f64> = ds
        .transitions()
        .iter()
        .map(|t| (actor.act_raw(&t.state).unwrap()[0] - LinearPolicy::action(&t.state)).abs())
        .collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    assert!(mean < 1e-2, "mean absolute action error {mean}");
}

#[test]
fn bc_loss_falls_on_a_frozen_batch() {
    let ds = generate_dataset(&EnvSpec::new(EnvKind::PointMass2D), Tier::Medium, 2_000, 1).unwrap();
    let stats = compute_norm_stats(&ds).unwrap();
    let batch = TrainingData::new(&ds, &stats).unwrap().sample(128, &mut Rng::new(0));
    let mut actor = Actor::init(&ds.spec(), stats, &[32, 32], &mut Rng::new(1)).unwrap();
    let mut opt = AdamState::new(&actor.net, AdamConfig::with_learning_rate(1e-3));
    let mut losses = Vec::new();
    for _ in 0..100 {
        let (loss, grads) = bc_objective(&actor, batch.states.view(), batch.actions.view()).unwrap();
        losses.push(loss);
        adam_step(&mut actor.net, &grads, &mut opt).unwrap();
    }
    assert!(losses[99] < 0.5 * losses[0], "{} -> {}", losses[0], losses[99]);
}

#[test]
fn bc_on_expert_data_beats_bc_on_medium_data() {
    let env = EnvSpec::new(EnvKind::PointMass2D);
    let config = PolicyConfig {
        updates: 2_000,
        ..Default::default()
    };
    let score = |tier| {
        let ds = generate_dataset(&env, tier, 20_000, 2).unwrap();
        let (actor, _) = train_bc(&ds, &config).unwrap();
        evaluate(&actor, &env, 50, 3).unwrap().normalized_score
    };
    let expert = score(Tier::Expert);
    let medium = score(Tier::Medium);
    assert!(expert >= medium, "expert {expert} < medium {medium}");
}

#[test]
fn td3bc_on_expert_lineworld_reaches_expert_level() {
    let env = EnvSpec::new(EnvKind::LineWorld);
    let ds = generate_dataset(&env, Tier::Expert, 10_000, 4).unwrap();
    let config = PolicyConfig {
        updates: 50_000,
        log_every: 10_000,
        ..Default::default()
    };
    let (agent, log) = train_policy(&ds, &config).unwrap();
    let score = evaluate(&agent, &env, 100, 5).unwrap().normalized_score;
    assert!(score >= 90.0, "normalized score {score}");
    assert_eq!(log.rows.len(), 5);
}

#[test]
fn same_seed_same_actor() {
    let ds = generate_dataset(&EnvSpec::new(EnvKind::PointMass2D), Tier::MediumReplay, 2_000, 6).unwrap();
    let config = PolicyConfig {
        updates: 100,
        ..Default::default()
    };
    let (a, _) = train_policy(&ds, &config).unwrap();
    let (b, _) = train_policy(&ds, &config).unwrap();
    assert_eq!(a.actor, b.actor);
}

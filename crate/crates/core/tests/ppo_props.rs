use std::sync::Arc;

use expgen::env::{new_episode, Action, LevelKind, LevelSpec, ObsMode};
use expgen::policy::{AdamState, Architecture, MemoryState, ObsEncoding, PolicyParams};
use expgen::ppo::{
    normalize, ppo_update, surrogate_objective, train, Advantages, PpoConfig, RewardSource, RolloutBatch, TrainSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bandit_arch() -> Architecture {
    // 5x5 flat input; only two distinct inputs are ever used.
    Architecture::new(ObsEncoding::Flat, 5, 5, vec![8], None, 5)
}

fn state(i: usize) -> Vec<f64> {
    let mut x = vec![0.0; bandit_arch().input_dim()];
    x[i] = 1.0;
    x
}

/// One-step episodes on a two-state bandit: action 0 pays in state 0,
/// action 1 in state 1.
fn bandit_batch(p: &PolicyParams, n: usize, rng: &mut ChaCha8Rng) -> (RolloutBatch, Advantages) {
    let mut b = RolloutBatch {
        n_envs: 1,
        len: n,
        ..Default::default()
    };
    let mem = MemoryState::zeros(&p.arch);
    for t in 0..n {
        let s = t % 2;
        let x = state(s);
        let (d, v, _) = p.forward(&x, &mem).unwrap();
        let a = d.sample(rng);
        let r = if a == s { 1.0 } else { 0.0 };
        b.inputs.push(x);
        b.memories.push(Vec::new());
        b.actions.push(a);
        b.log_probs.push(d.log_prob(a));
        b.rewards.push(r);
        b.extrinsic.push(r);
        b.intrinsic.push(0.0);
        b.values.push(v);
        b.dones.push(true);
        b.starts.push(true);
        b.buffer_lens.push(0);
        b.episode_steps.push(0);
    }
    b.bootstrap_values.push(0.0);
    let raw: Vec<f64> = b.rewards.iter().zip(&b.values).map(|(r, v)| r - v).collect();
    let adv = Advantages {
        normalized: normalize(&raw),
        returns: b.rewards.clone(),
        raw,
    };
    (b, adv)
}

fn cfg(epochs: usize, entropy_bonus: f64) -> PpoConfig {
    PpoConfig {
        epochs,
        minibatches: 4,
        entropy_bonus,
        n_envs: 1,
        rollout_len: 64,
        lr: 1e-3,
        ..PpoConfig::default()
    }
}

#[test]
fn bandit_surrogate_does_not_decrease() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = PolicyParams::init(bandit_arch(), &mut rng);
    let (batch, adv) = bandit_batch(&p, 64, &mut rng);
    let mut opt = AdamState::new(p.len());
    let c = cfg(1, 0.0);
    let mut prev = surrogate_objective(&p, &batch, &adv, c.clip).unwrap();
    for epoch in 0..3 {
        ppo_update(&mut p, &mut opt, &batch, &adv, &c, &mut rng).unwrap();
        let now = surrogate_objective(&p, &batch, &adv, c.clip).unwrap();
        assert!(now >= prev - 1e-12, "epoch {epoch}: {prev} -> {now}");
        prev = now;
    }
}

#[test]
fn large_entropy_bonus_drives_policy_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = PolicyParams::init(bandit_arch(), &mut rng);
    p.segment_mut("pi.b").unwrap()[0] = 3.0;
    let (d, _, _) = p.forward(&state(0), &MemoryState::zeros(&p.arch)).unwrap();
    assert!(d.entropy() < 0.6 * 5f64.ln());
    let mut opt = AdamState::new(p.len());
    let c = PpoConfig { lr: 3e-3, ..cfg(4, 10.0) };
    for _ in 0..200 {
        let (batch, adv) = bandit_batch(&p, 64, &mut rng);
        ppo_update(&mut p, &mut opt, &batch, &adv, &c, &mut rng).unwrap();
    }
    // The regularized optimum is a softmax of advantages at temperature 10,
    // so "uniform" means entropy within 1% of ln 5.
    for s in 0..2 {
        let (d, _, _) = p.forward(&state(s), &MemoryState::zeros(&p.arch)).unwrap();
        assert!(d.entropy() > 0.99 * 5f64.ln(), "state {s}: {:?}", d.probs);
    }
}

/// Every step takes the same action with ratio `ratio` against the stored
/// log-probability and the same advantage sign.
fn saturated_update(ratio: f64, advantage: f64) -> (PolicyParams, PolicyParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = PolicyParams::init(bandit_arch(), &mut rng);
    let (mut batch, _) = bandit_batch(&p, 8, &mut rng);
    let mem = MemoryState::zeros(&p.arch);
    for i in 0..batch.transitions() {
        batch.actions[i] = 2;
        let (d, _, _) = p.forward(&batch.inputs[i], &mem).unwrap();
        batch.log_probs[i] = d.log_prob(2) - ratio.ln();
    }
    let adv = Advantages {
        raw: vec![advantage; 8],
        normalized: vec![advantage; 8],
        returns: batch.values.clone(),
    };
    let c = PpoConfig {
        value_coef: 0.0,
        minibatches: 1,
        rollout_len: 8,
        ..cfg(1, 0.0)
    };
    let mut q = p.clone();
    let mut opt = AdamState::new(q.len());
    ppo_update(&mut q, &mut opt, &batch, &adv, &c, &mut rng).unwrap();
    (p, q)
}

#[test]
fn clipped_terms_contribute_no_gradient() {
    let (p, q) = saturated_update(1.5, 1.0);
    assert_eq!(p.weights, q.weights);
    let (p, q) = saturated_update(0.5, -1.0);
    assert_eq!(p.weights, q.weights);
    // Inside the trust region the same batch does move the policy.
    let (p, q) = saturated_update(1.0, 1.0);
    assert_ne!(p.weights, q.weights);
}

fn corridor() -> Arc<LevelSpec> {
    Arc::new(LevelSpec::from_ascii(LevelKind::Maze, "#######\n#S...G#\n#######").unwrap())
}

fn train_corridor(reward_norm: bool, seed: u64) -> expgen::ppo::TrainOutcome {
    let levels = vec![corridor()];
    let c = PpoConfig {
        n_envs: 4,
        rollout_len: 64,
        minibatches: 4,
        gamma: 0.9,
        lr: 3e-3,
        total_steps: 20_000,
        reward_norm,
        ..PpoConfig::default()
    };
    train(&TrainSpec {
        levels: &levels,
        eval_levels: &[],
        mode: ObsMode::Full,
        horizon: 32,
        cfg: &c,
        src: &RewardSource::Extrinsic,
        arch: Architecture::new(ObsEncoding::Flat, 7, 3, vec![16], None, 5),
        seed,
        eval_every: 0,
    })
    .unwrap()
}

#[test]
fn training_is_deterministic() {
    let a = train_corridor(true, 5);
    let b = train_corridor(true, 5);
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.params.weights, b.params.weights);
}

#[test]
fn reward_normalization_keeps_greedy_action() {
    let (_, obs) = new_episode(corridor(), ObsMode::Full);
    for norm in [true, false] {
        let out = train_corridor(norm, 9);
        let (d, _, _) = out.params.forward(&out.params.encode(&obs), &MemoryState::zeros(&out.params.arch)).unwrap();
        assert_eq!(d.argmax(), Action::Right.index(), "reward_norm={norm}: {:?}", d.probs);
    }
}

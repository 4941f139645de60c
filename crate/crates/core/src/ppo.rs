//! Rollout collection, generalized advantage estimation and clipped-surrogate
//! PPO updates, with a choice of extrinsic, intrinsic or mixed rewards.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{downsample, knn_intrinsic_reward, EpisodeBuffer, KnnConfig};
use crate::env::{new_episode_with_horizon, Action, Cell, EnvState, LevelSpec, ObsMode, Observation};
use crate::error::{Error, Result};
use crate::policy::{
    optimizer_step, AdamState, Architecture, HeadGrad, MemoryState, PolicyParams, Sequence, StepOutput,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub clip: f64,
    pub entropy_bonus: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub lr: f64,
    pub n_envs: usize,
    pub reward_norm: bool,
    pub total_steps: usize,
    /// Segment length for truncated backpropagation through time.
    pub bptt_len: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.999,
            lambda: 0.95,
            rollout_len: 512,
            epochs: 3,
            minibatches: 8,
            clip: 0.2,
            entropy_bonus: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            lr: 5e-4,
            n_envs: 32,
            reward_norm: true,
            total_steps: 25_000_000,
            bptt_len: 512,
        }
    }
}

impl PpoConfig {
    pub fn batch_size(&self) -> usize {
        self.rollout_len * self.n_envs
    }

    pub fn validate(&self, recurrent: bool) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("ppo.gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("ppo.lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("ppo.clip must be positive");
        }
        if self.rollout_len == 0 || self.n_envs == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("ppo.rollout_len, n_envs, epochs and minibatches must be positive");
        }
        if self.batch_size() % self.minibatches != 0 {
            return bad("ppo.minibatches must divide rollout_len * n_envs");
        }
        if recurrent {
            if self.bptt_len == 0 || self.rollout_len % self.bptt_len != 0 {
                return bad("ppo.bptt_len must divide rollout_len");
            }
            let segments = self.n_envs * self.rollout_len / self.bptt_len;
            if segments % self.minibatches != 0 {
                return bad("ppo.minibatches must divide the number of recurrent segments");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum RewardSource {
    Extrinsic,
    Intrinsic { knn: KnnConfig },
    /// `beta * intrinsic + (1 - beta) * extrinsic`.
    Mixed { beta: f64, knn: KnnConfig },
}

impl RewardSource {
    pub fn knn(&self) -> Option<&KnnConfig> {
        match self {
            RewardSource::Extrinsic => None,
            RewardSource::Intrinsic { knn } | RewardSource::Mixed { knn, .. } => Some(knn),
        }
    }

    pub fn combine(&self, extrinsic: f64, intrinsic: f64) -> f64 {
        match *self {
            RewardSource::Extrinsic => extrinsic,
            RewardSource::Intrinsic { .. } => intrinsic,
            RewardSource::Mixed { beta, .. } => beta * intrinsic + (1.0 - beta) * extrinsic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let RewardSource::Mixed { beta, .. } = self {
            if !(0.0..=1.0).contains(beta) {
                return Err(Error::Config("reward.beta must lie in [0, 1]".into()));
            }
        }
        match self.knn() {
            Some(k) => k.validate(),
            None => Ok(()),
        }
    }
}

/// Summary of one finished episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub level_seed: u64,
    pub extrinsic_return: f64,
    pub intrinsic_return: f64,
    pub success: bool,
    pub length: usize,
    pub distinct_cells: usize,
}

/// Per-episode bookkeeping shared by training workers and evaluation.
#[derive(Debug, Clone)]
pub struct EpisodeTracker {
    knn: Option<KnnConfig>,
    buffer: EpisodeBuffer,
    visited: HashSet<Cell>,
    extrinsic: f64,
    intrinsic: f64,
    length: usize,
}

impl EpisodeTracker {
    pub fn new(knn: Option<KnnConfig>) -> Self {
        EpisodeTracker {
            knn,
            buffer: EpisodeBuffer::new(),
            visited: HashSet::new(),
            extrinsic: 0.0,
            intrinsic: 0.0,
            length: 0,
        }
    }

    /// Clears all state and records the initial observation.
    pub fn begin(&mut self, state: &EnvState, obs: &Observation) -> Result<()> {
        self.buffer.clear();
        self.visited.clear();
        self.extrinsic = 0.0;
        self.intrinsic = 0.0;
        self.length = 0;
        self.visited.insert(state.position);
        if let Some(knn) = &self.knn {
            self.buffer.push(downsample(obs, knn.pool_kernel)?);
        }
        Ok(())
    }

    /// Records a transition; returns the intrinsic reward of the new state
    /// (0 without a k-NN config).
    pub fn record(&mut self, state: &EnvState, obs: &Observation, extrinsic: f64) -> Result<f64> {
        let r_int = match &self.knn {
            Some(knn) => {
                let s = downsample(obs, knn.pool_kernel)?;
                let r = knn_intrinsic_reward(&self.buffer, &s, knn)?;
                self.buffer.push(s);
                r
            }
            None => 0.0,
        };
        self.visited.insert(state.position);
        self.extrinsic += extrinsic;
        self.intrinsic += r_int;
        self.length += 1;
        Ok(r_int)
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn finish(&self, level_seed: u64, success: bool) -> EpisodeStats {
        EpisodeStats {
            level_seed,
            extrinsic_return: self.extrinsic,
            intrinsic_return: self.intrinsic,
            success,
            length: self.length,
            distinct_cells: self.visited.len(),
        }
    }
}

/// Running standard deviation of discounted returns for reward scaling.
#[derive(Debug, Clone)]
pub struct RewardNormalizer {
    gamma: f64,
    returns: Vec<f64>,
    count: f64,
    mean: f64,
    m2: f64,
}

impl RewardNormalizer {
    pub fn new(n_envs: usize, gamma: f64) -> Self {
        RewardNormalizer {
            gamma,
            returns: vec![0.0; n_envs],
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    /// Updates the running return of `env` and returns the scaled reward.
    pub fn scale(&mut self, env: usize, reward: f64, done: bool) -> f64 {
        let ret = self.returns[env] * self.gamma + reward;
        self.count += 1.0;
        let delta = ret - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (ret - self.mean);
        self.returns[env] = if done { 0.0 } else { ret };
        reward / (self.std() + 1e-8)
    }

    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            (self.m2 / self.count).sqrt()
        }
    }
}

/// One environment plus its episode-local state.
#[derive(Debug, Clone)]
pub struct EnvWorker {
    levels: Arc<Vec<Arc<LevelSpec>>>,
    mode: ObsMode,
    horizon: usize,
    rng: ChaCha8Rng,
    state: EnvState,
    input: Vec<f64>,
    memory: MemoryState,
    tracker: EpisodeTracker,
}

impl EnvWorker {
    pub fn new(
        levels: Arc<Vec<Arc<LevelSpec>>>,
        mode: ObsMode,
        horizon: usize,
        arch: &Architecture,
        knn: Option<KnnConfig>,
        seed: u64,
    ) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("empty training level set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let level = levels[rng.random_range(0..levels.len())].clone();
        let (state, obs) = new_episode_with_horizon(level, mode, horizon);
        let mut tracker = EpisodeTracker::new(knn);
        tracker.begin(&state, &obs)?;
        Ok(EnvWorker {
            input: arch.encoding.encode(&obs),
            levels,
            mode,
            horizon,
            rng,
            state,
            memory: MemoryState::zeros(arch),
            tracker,
        })
    }

    fn reset(&mut self, arch: &Architecture) -> Result<()> {
        let level = self.levels[self.rng.random_range(0..self.levels.len())].clone();
        let (state, obs) = new_episode_with_horizon(level, self.mode, self.horizon);
        self.tracker.begin(&state, &obs)?;
        self.input = arch.encoding.encode(&obs);
        self.state = state;
        self.memory.reset();
        Ok(())
    }

    pub fn level_seed(&self) -> u64 {
        self.state.level.seed
    }
}

/// Transitions from `n_envs` environments, stored env-major.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub len: usize,
    pub inputs: Vec<Vec<f64>>,
    /// Memory fed to the policy at each step (empty for feedforward policies).
    pub memories: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    /// Rewards as consumed by the learner (after optional normalization).
    pub rewards: Vec<f64>,
    pub extrinsic: Vec<f64>,
    pub intrinsic: Vec<f64>,
    pub values: Vec<f64>,
    /// The episode ended with this step.
    pub dones: Vec<bool>,
    /// An episode starts at this step; memory was zeroed before it.
    pub starts: Vec<bool>,
    pub bootstrap_values: Vec<f64>,
    /// Episode buffer size when the step's intrinsic reward was computed.
    pub buffer_lens: Vec<usize>,
    /// Steps already taken in the current episode before this one.
    pub episode_steps: Vec<usize>,
    pub episodes: Vec<EpisodeStats>,
}

impl RolloutBatch {
    pub fn transitions(&self) -> usize {
        self.actions.len()
    }

    #[inline]
    pub fn idx(&self, env: usize, t: usize) -> usize {
        env * self.len + t
    }
}

/// Steps every worker `cfg.rollout_len` times under `policy`.
pub fn collect_rollout(
    policy: &PolicyParams,
    workers: &mut [EnvWorker],
    cfg: &PpoConfig,
    src: &RewardSource,
    normalizer: Option<&mut RewardNormalizer>,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    let n = workers.len() * cfg.rollout_len;
    let recurrent = policy.arch.is_recurrent();
    let mut b = RolloutBatch {
        n_envs: workers.len(),
        len: cfg.rollout_len,
        inputs: Vec::with_capacity(n),
        memories: Vec::with_capacity(if recurrent { n } else { 0 }),
        actions: Vec::with_capacity(n),
        log_probs: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        extrinsic: Vec::with_capacity(n),
        intrinsic: Vec::with_capacity(n),
        values: Vec::with_capacity(n),
        dones: Vec::with_capacity(n),
        starts: Vec::with_capacity(n),
        bootstrap_values: Vec::with_capacity(workers.len()),
        buffer_lens: Vec::with_capacity(n),
        episode_steps: Vec::with_capacity(n),
        episodes: Vec::new(),
    };
    let mut normalizer = normalizer;
    for (e, w) in workers.iter_mut().enumerate() {
        for _ in 0..cfg.rollout_len {
            let (dist, value, next_mem) = policy.forward(&w.input, &w.memory)?;
            let action = dist.sample(rng);
            b.starts.push(w.tracker.length() == 0);
            b.episode_steps.push(w.tracker.length());
            b.buffer_lens.push(w.tracker.buffer_len());
            b.inputs.push(std::mem::take(&mut w.input));
            if recurrent {
                b.memories.push(std::mem::replace(&mut w.memory, next_mem).hidden);
            }
            b.actions.push(action);
            b.log_probs.push(dist.log_prob(action));
            b.values.push(value);

            let act = Action::from_index(action).expect("policy head matches action count");
            let out = w.state.step_mut(act)?;
            let r_int = w.tracker.record(&w.state, &out.observation, out.extrinsic_reward)?;
            let reward = src.combine(out.extrinsic_reward, r_int);
            let reward = match normalizer.as_deref_mut() {
                Some(nm) => nm.scale(e, reward, out.done),
                None => reward,
            };
            b.rewards.push(reward);
            b.extrinsic.push(out.extrinsic_reward);
            b.intrinsic.push(r_int);
            b.dones.push(out.done);
            if out.done {
                let success = out.done_reason == crate::env::DoneReason::Goal;
                b.episodes.push(w.tracker.finish(w.level_seed(), success));
                w.reset(&policy.arch)?;
            } else {
                w.input = policy.arch.encoding.encode(&out.observation);
            }
        }
        let (_, v, _) = policy.forward(&w.input, &w.memory)?;
        b.bootstrap_values.push(v);
    }
    Ok(b)
}

/// GAE over one environment's trajectory with done-masking. Returns
/// `(advantages, returns)` where `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 == n { bootstrap } else { values[t + 1] };
        let nonterminal = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * nonterminal - values[t];
        gae = delta + gamma * lambda * nonterminal * gae;
        adv[t] = gae;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub raw: Vec<f64>,
    /// Zero mean, unit variance over the batch.
    pub normalized: Vec<f64>,
    pub returns: Vec<f64>,
}

pub fn batch_advantages(batch: &RolloutBatch, gamma: f64, lambda: f64) -> Advantages {
    let mut raw = Vec::with_capacity(batch.transitions());
    let mut returns = Vec::with_capacity(batch.transitions());
    for e in 0..batch.n_envs {
        let r = batch.idx(e, 0)..batch.idx(e, 0) + batch.len;
        let (a, ret) = compute_gae(
            &batch.rewards[r.clone()],
            &batch.values[r.clone()],
            &batch.dones[r],
            batch.bootstrap_values[e],
            gamma,
            lambda,
        );
        raw.extend(a);
        returns.extend(ret);
    }
    let normalized = normalize(&raw);
    Advantages {
        raw,
        normalized,
        returns,
    }
}

pub fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    xs.iter().map(|x| (x - mean) / sd).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean clipped surrogate objective (higher is better).
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Default)]
struct StepTerms {
    surrogate: f64,
    value_loss: f64,
    entropy: f64,
    kl: f64,
    clipped: f64,
}

/// PPO loss for one step and its head gradients, scaled by `scale`.
#[allow(clippy::too_many_arguments)]
fn ppo_step_loss(
    out: &StepOutput<'_>,
    action: usize,
    old_log_prob: f64,
    advantage: f64,
    ret: f64,
    cfg: &PpoConfig,
    scale: f64,
    terms: &mut StepTerms,
) -> HeadGrad {
    let p = out.probs;
    let logp = p[action].max(f64::MIN_POSITIVE).ln();
    let ratio = (logp - old_log_prob).exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * advantage;
    let surrogate = unclipped.min(clipped);
    // d(-surrogate)/d logp; zero once the clipped term is the active minimum.
    let dlogp = if unclipped <= clipped { -ratio * advantage } else { 0.0 };
    let entropy: f64 = -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>();
    let value_err = out.value - ret;
    let loss = -surrogate + cfg.value_coef * 0.5 * value_err * value_err - cfg.entropy_bonus * entropy;

    let mut dlogits = Vec::with_capacity(p.len());
    for (j, &pj) in p.iter().enumerate() {
        let onehot = if j == action { 1.0 } else { 0.0 };
        let d_logp = dlogp * (onehot - pj);
        // dH/dlogit_j = -p_j (ln p_j + H)
        let d_ent = if pj > 0.0 { -pj * (pj.ln() + entropy) } else { 0.0 };
        dlogits.push(scale * (d_logp - cfg.entropy_bonus * d_ent));
    }
    terms.surrogate += surrogate;
    terms.value_loss += 0.5 * value_err * value_err;
    terms.entropy += entropy;
    terms.kl += old_log_prob - logp;
    if (ratio - 1.0).abs() > cfg.clip {
        terms.clipped += 1.0;
    }
    HeadGrad {
        loss: scale * loss,
        dlogits,
        dvalue: scale * cfg.value_coef * value_err,
    }
}

/// Runs `cfg.epochs` passes of shuffled minibatch updates over the batch.
pub fn ppo_update(
    params: &mut PolicyParams,
    opt: &mut AdamState,
    batch: &RolloutBatch,
    adv: &Advantages,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let recurrent = params.arch.is_recurrent();
    // Units: single transitions, or (env, start) segments for recurrent policies.
    let seg_len = if recurrent { cfg.bptt_len.min(batch.len).max(1) } else { 1 };
    let mut units: Vec<(usize, usize)> = Vec::new();
    for e in 0..batch.n_envs {
        let mut t = 0;
        while t < batch.len {
            units.push((e, t));
            t += seg_len;
        }
    }
    let n_mb = cfg.minibatches.min(units.len()).max(1);
    let mut stats = UpdateStats::default();
    let mut counted = 0.0;
    let mut updates = 0.0;
    let empty: Vec<f64> = Vec::new();
    for _ in 0..cfg.epochs {
        units.shuffle(rng);
        for mb in 0..n_mb {
            let chunk = &units[mb * units.len() / n_mb..(mb + 1) * units.len() / n_mb];
            // Index of every step in every sequence, in sequence order.
            let mut seq_steps: Vec<Vec<usize>> = Vec::with_capacity(chunk.len());
            let mut sequences: Vec<Sequence<'_>> = Vec::with_capacity(chunk.len());
            if recurrent {
                for &(e, t0) in chunk {
                    let t1 = (t0 + seg_len).min(batch.len);
                    let idx: Vec<usize> = (t0..t1).map(|t| batch.idx(e, t)).collect();
                    sequences.push(Sequence {
                        initial_memory: &batch.memories[idx[0]],
                        inputs: idx.iter().map(|&i| batch.inputs[i].as_slice()).collect(),
                        resets: idx.iter().map(|&i| batch.starts[i]).collect(),
                    });
                    seq_steps.push(idx);
                }
            } else {
                let idx: Vec<usize> = chunk.iter().map(|&(e, t)| batch.idx(e, t)).collect();
                sequences.push(Sequence {
                    initial_memory: &empty,
                    inputs: idx.iter().map(|&i| batch.inputs[i].as_slice()).collect(),
                    resets: vec![true; idx.len()],
                });
                seq_steps.push(idx);
            }
            let n_steps: usize = seq_steps.iter().map(Vec::len).sum();
            let scale = 1.0 / n_steps as f64;
            let mut terms = StepTerms::default();
            let result = params.loss_and_gradient(
                &sequences,
                &mut |s, t, out| {
                    let i = seq_steps[s][t];
                    ppo_step_loss(
                        out,
                        batch.actions[i],
                        batch.log_probs[i],
                        adv.normalized[i],
                        adv.returns[i],
                        cfg,
                        scale,
                        &mut terms,
                    )
                },
                0.0,
            );
            let (_, mut grads) = match result {
                Ok(v) => v,
                Err(Error::Numeric(msg)) => {
                    let (mut amin, mut amax, mut rmin, mut rmax) =
                        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
                    for i in seq_steps.iter().flatten() {
                        amin = amin.min(adv.normalized[*i]);
                        amax = amax.max(adv.normalized[*i]);
                        rmin = rmin.min(adv.returns[*i]);
                        rmax = rmax.max(adv.returns[*i]);
                    }
                    return Err(Error::Numeric(format!(
                        "{msg}; minibatch of {n_steps} steps, advantages [{amin}, {amax}], returns [{rmin}, {rmax}]"
                    )));
                }
                Err(e) => return Err(e),
            };
            let gn = grads.clip_norm(cfg.max_grad_norm);
            optimizer_step(params, &grads, cfg.lr, opt)?;
            stats.surrogate += terms.surrogate;
            stats.value_loss += terms.value_loss;
            stats.entropy += terms.entropy;
            stats.approx_kl += terms.kl;
            stats.clip_fraction += terms.clipped;
            stats.grad_norm += gn;
            counted += n_steps as f64;
            updates += 1.0;
        }
    }
    stats.surrogate /= counted;
    stats.value_loss /= counted;
    stats.entropy /= counted;
    stats.approx_kl /= counted;
    stats.clip_fraction /= counted;
    stats.grad_norm /= updates;
    Ok(stats)
}

/// Mean clipped surrogate of `params` on a batch (no gradient).
pub fn surrogate_objective(
    params: &PolicyParams,
    batch: &RolloutBatch,
    adv: &Advantages,
    clip: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let recurrent = params.arch.is_recurrent();
    for e in 0..batch.n_envs {
        let mut mem = if recurrent {
            MemoryState {
                hidden: batch.memories[batch.idx(e, 0)].clone(),
            }
        } else {
            MemoryState { hidden: Vec::new() }
        };
        for t in 0..batch.len {
            let i = batch.idx(e, t);
            if batch.starts[i] {
                mem.reset();
            }
            let (d, _, next) = params.forward(&batch.inputs[i], &mem)?;
            mem = next;
            let ratio = (d.log_prob(batch.actions[i]) - batch.log_probs[i]).exp();
            let a = adv.normalized[i];
            total += (ratio * a).min(ratio.clamp(1.0 - clip, 1.0 + clip) * a);
        }
    }
    Ok(total / batch.transitions() as f64)
}

/// Runs one episode per `(level, repetition)` and reports statistics. Actions
/// are sampled unless `greedy` is set.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    params: &PolicyParams,
    levels: &[Arc<LevelSpec>],
    mode: ObsMode,
    horizon: usize,
    knn: Option<&KnnConfig>,
    episodes_per_level: usize,
    greedy: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodeStats>> {
    let mut out = Vec::with_capacity(levels.len() * episodes_per_level);
    let mut tracker = EpisodeTracker::new(knn.copied());
    for level in levels {
        for _ in 0..episodes_per_level {
            let (mut state, obs) = new_episode_with_horizon(level.clone(), mode, horizon);
            tracker.begin(&state, &obs)?;
            let mut input = params.encode(&obs);
            let mut mem = MemoryState::zeros(&params.arch);
            loop {
                let (dist, _, next) = params.forward(&input, &mem)?;
                mem = next;
                let a = if greedy { dist.argmax() } else { dist.sample(rng) };
                let step = state.step_mut(Action::from_index(a).expect("valid action"))?;
                tracker.record(&state, &step.observation, step.extrinsic_reward)?;
                if step.done {
                    out.push(tracker.finish(level.seed, step.done_reason == crate::env::DoneReason::Goal));
                    break;
                }
                input = params.encode(&step.observation);
            }
        }
    }
    Ok(out)
}

/// Uniform-random policy baseline.
pub fn evaluate_random(
    levels: &[Arc<LevelSpec>],
    mode: ObsMode,
    horizon: usize,
    knn: Option<&KnnConfig>,
    episodes_per_level: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodeStats>> {
    let mut out = Vec::new();
    let mut tracker = EpisodeTracker::new(knn.copied());
    for level in levels {
        for _ in 0..episodes_per_level {
            let (mut state, obs) = new_episode_with_horizon(level.clone(), mode, horizon);
            tracker.begin(&state, &obs)?;
            loop {
                let a = Action::ALL[rng.random_range(0..Action::COUNT)];
                let step = state.step_mut(a)?;
                tracker.record(&state, &step.observation, step.extrinsic_reward)?;
                if step.done {
                    out.push(tracker.finish(level.seed, step.done_reason == crate::env::DoneReason::Goal));
                    break;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub train_return_mean: Option<f64>,
    pub test_return_mean: Option<f64>,
    pub intrinsic_return_mean: Option<f64>,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

pub struct TrainSpec<'a> {
    pub levels: &'a [Arc<LevelSpec>],
    /// Held-out levels for periodic test evaluation; may be empty.
    pub eval_levels: &'a [Arc<LevelSpec>],
    pub mode: ObsMode,
    pub horizon: usize,
    pub cfg: &'a PpoConfig,
    pub src: &'a RewardSource,
    pub arch: Architecture,
    pub seed: u64,
    /// Evaluate every this many iterations (0 disables).
    pub eval_every: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub optimizer: AdamState,
    pub curve: Vec<CurveRow>,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Full training loop: collect, estimate advantages, update, until
/// `cfg.total_steps` environment steps have been taken.
pub fn train(spec: &TrainSpec<'_>) -> Result<TrainOutcome> {
    let cfg = spec.cfg;
    cfg.validate(spec.arch.is_recurrent())?;
    spec.src.validate()?;
    if spec.levels.is_empty() {
        return Err(Error::Config("empty training level set".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = PolicyParams::init(spec.arch.clone(), &mut master);
    let mut opt = AdamState::new(params.len());
    let levels = Arc::new(spec.levels.to_vec());
    let knn = spec.src.knn().copied();
    let mut workers = (0..cfg.n_envs)
        .map(|_| {
            let s = master.random();
            EnvWorker::new(levels.clone(), spec.mode, spec.horizon, &spec.arch, knn, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut act_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut upd_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut eval_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut normalizer = cfg
        .reward_norm
        .then(|| RewardNormalizer::new(cfg.n_envs, cfg.gamma));
    let iterations = cfg.total_steps.div_ceil(cfg.batch_size()).max(1);
    let mut curve = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let batch = collect_rollout(&params, &mut workers, cfg, spec.src, normalizer.as_mut(), &mut act_rng)?;
        let adv = batch_advantages(&batch, cfg.gamma, cfg.lambda);
        let stats = ppo_update(&mut params, &mut opt, &batch, &adv, cfg, &mut upd_rng)?;
        let test_return_mean = if spec.eval_every > 0
            && !spec.eval_levels.is_empty()
            && ((it + 1) % spec.eval_every == 0 || it + 1 == iterations)
        {
            let eps = evaluate_policy(
                &params,
                spec.eval_levels,
                spec.mode,
                spec.horizon,
                knn.as_ref(),
                1,
                false,
                &mut eval_rng,
            )?;
            mean_of(eps.iter().map(|e| e.extrinsic_return))
        } else {
            None
        };
        curve.push(CurveRow {
            step: (it + 1) * cfg.batch_size(),
            train_return_mean: mean_of(batch.episodes.iter().map(|e| e.extrinsic_return)),
            test_return_mean,
            intrinsic_return_mean: knn
                .is_some()
                .then(|| mean_of(batch.episodes.iter().map(|e| e.intrinsic_return)))
                .flatten(),
            surrogate: stats.surrogate,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
        });
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        curve,
    })
}

pub fn write_curve_csv<W: std::io::Write>(w: W, curve: &[CurveRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in curve {
        wr.serialize(row)?;
    }
    wr.flush().map_err(|e| Error::io("curve.csv", e))?;
    Ok(())
}
